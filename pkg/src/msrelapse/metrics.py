"""Ranking metrics and percentile-bootstrap confidence intervals."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _prep(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be 1-D and of equal length")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties count half."""
    s, y = _prep(scores, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs both classes")
    ranks = rankdata(s)  # average ranks: exact multiples of 0.5
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision; tied scores form one block sharing the block's precision."""
    s, y = _prep(scores, labels)
    n_pos = y.sum()
    if n_pos == 0:
        raise MetricError("pr_auc needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    gained = np.diff(np.r_[0.0, tp])
    return float(np.sum((tp / seen) * gained) / n_pos)


def pr_baseline(labels) -> float:
    y = np.asarray(labels, dtype=float)
    if y.size == 0:
        raise MetricError("pr_baseline of an empty label set")
    return float(y.sum() / y.size)


def bootstrap_ci(scores, labels, metric: Callable = roc_auc, n_resamples: int = 5000,
                 alpha: float = 0.05, seed: int = 0) -> tuple[float, float]:
    """Percentile interval over resampled (score, label) pairs.

    Resamples that lack a class are discarded and redrawn; if more draws are
    discarded than kept the metric is treated as undefined.
    """
    s, y = _prep(scores, labels)
    if np.unique(y).size < 2:
        raise MetricError("bootstrap_ci needs both classes")
    rng = np.random.default_rng(seed)
    n = s.size
    stats = np.empty(n_resamples)
    kept = rejected = 0
    while kept < n_resamples:
        idx = rng.integers(0, n, n)
        yy = y[idx]
        if yy.min() == yy.max():
            rejected += 1
            if rejected > n_resamples:
                raise MetricError("metric undefined on more than half of the bootstrap resamples")
            continue
        stats[kept] = metric(s[idx], yy)
        kept += 1
    lo, hi = np.percentile(stats, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


@dataclass(frozen=True)
class EvalReport:
    auc_roc: float
    auc_roc_ci: tuple[float, float]
    auc_pr: float
    pr_baseline: float
    n_test: int

    def to_dict(self) -> dict:
        return {"auc_roc": self.auc_roc, "auc_roc_ci": list(self.auc_roc_ci),
                "auc_pr": self.auc_pr, "pr_baseline": self.pr_baseline, "n_test": self.n_test}


def evaluate(scores, labels, n_resamples: int = 5000, alpha: float = 0.05, seed: int = 0) -> EvalReport:
    auc = roc_auc(scores, labels)
    lo, hi = bootstrap_ci(scores, labels, roc_auc, n_resamples, alpha, seed)
    # a percentile interval can exclude the point estimate on tiny samples
    return EvalReport(auc, (min(lo, auc), max(hi, auc)), pr_auc(scores, labels),
                      pr_baseline(labels), len(labels))
