"""Feature selection: correlation pruning, importance thresholding, backward elimination."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cv import CVConfig, LR_C_GRID, PreparedFold, lr_fold_scores, prepare_folds
from .data import DataError, DataTable, correlation_matrix_array, missing_fraction

log = logging.getLogger(__name__)

METHODS = ("all", "corr_prune", "vip", "bfs")


@dataclass
class SelectionResult:
    method: str
    selected: list[str]
    scores: dict[str, float] | None = None
    curve: list[tuple[int, float, float]] | None = None
    removal_order: list[str] | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown selection method {self.method!r}")
        if (self.curve is not None) != (self.method == "bfs"):
            raise ValueError("a curve is present exactly for backward selection")

    def to_dict(self) -> dict:
        out = {"method": self.method, "selected": list(self.selected)}
        if self.scores is not None:
            out["scores"] = dict(self.scores)
        if self.curve is not None:
            out["curve"] = [list(c) for c in self.curve]
            out["removal_order"] = list(self.removal_order or [])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        curve = [tuple(c) for c in d["curve"]] if "curve" in d else None
        return cls(d["method"], list(d["selected"]), d.get("scores"), curve, d.get("removal_order"))


def correlation_prune(train: DataTable, threshold: float = 0.3,
                      keep_overrides: Sequence[str] = (),
                      columns: Sequence[str] | None = None) -> SelectionResult:
    """Greedy pruning: accept a column iff |r| <= threshold against every accepted column.

    Visiting order: ``keep_overrides`` in the given order, then the rest by
    ascending missing fraction, then by name. Pairs whose correlation is
    undefined (a constant column, too few shared rows) do not block.
    """
    cols = list(columns) if columns is not None else list(train.columns)
    missing = [c for c in keep_overrides if c not in cols]
    if missing:
        raise DataError(f"override names unknown column {missing[0]!r}", column=missing[0])
    pinned = list(dict.fromkeys(keep_overrides))
    rest = sorted((c for c in cols if c not in set(pinned)),
                  key=lambda c: (missing_fraction(train, c), c))
    order = pinned + rest
    R = correlation_matrix_array(train.numeric_matrix(order))
    accepted: list[int] = []
    for j in range(len(order)):
        r = np.abs(R[j, accepted])
        if np.all(np.isnan(r) | (r <= threshold)):
            accepted.append(j)
    return SelectionResult("corr_prune", [order[j] for j in accepted])


def vip_select(importances: Sequence[float], names: Sequence[str], tol: float = 1e-9) -> SelectionResult:
    """Keep features whose importance is strictly above the mean ``1/p``, most important first."""
    imp = np.asarray(importances, dtype=float)
    if imp.size != len(names) or imp.size == 0:
        raise ValueError("importances and names must be non-empty and aligned")
    if abs(imp.sum() - 1.0) > tol:
        raise ValueError(f"importances sum to {imp.sum():.12g}, expected 1")
    mean = 1.0 / imp.size
    order = np.argsort(-imp, kind="stable")
    selected = [names[i] for i in order if imp[i] > mean]
    return SelectionResult("vip", selected, {n: float(v) for n, v in zip(names, imp)})


def _subset_score(folds: Sequence[PreparedFold], subset: Sequence[str], lr_grid: Sequence[float]):
    """Best mean fold AUC over the C grid; the first C wins ties."""
    best = None
    for C in sorted(lr_grid):
        s = lr_fold_scores(folds, C, subset)
        mean = float(np.mean(s))
        if best is None or mean > best[0]:
            best = (mean, float(np.std(s)), float(C))
    return best


def backward_select_folds(folds: Sequence[PreparedFold], lr_grid: Sequence[float] = LR_C_GRID,
                          names: Sequence[str] | None = None, min_size: int = 1,
                          threads: int = 1) -> SelectionResult:
    """Stepwise backward elimination on prepared folds.

    Each step scores every single-feature removal by its best mean CV AUC over
    ``lr_grid`` and drops the feature whose removal scores highest (ties drop
    the lexicographically last name). The curve holds one (size, mean, std)
    entry per subset size; the selection is the size with the highest mean,
    ties going to the smaller subset.
    """
    if names is None:  # a fold can lose a dummy level or a sparse column
        names = list(dict.fromkeys(c for f in folds for c in f.columns))
    current = list(names)
    if len(current) < 2:
        raise ValueError("backward selection needs at least two features")
    mean, std, _ = _subset_score(folds, current, lr_grid)
    curve = [(len(current), mean, std)]
    subsets = {len(current): list(current)}
    removed: list[str] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while len(current) > max(1, min_size):
            cands = [[c for c in current if c != drop] for drop in current]
            if pool is not None:
                results = list(pool.map(lambda s: _subset_score(folds, s, lr_grid), cands))
            else:
                results = [_subset_score(folds, s, lr_grid) for s in cands]
            pick = None
            for drop, res in zip(current, results):
                if pick is None or res[0] > pick[1][0] or (res[0] == pick[1][0] and drop > pick[0]):
                    pick = (drop, res)
            drop, (mean, std, _) = pick
            current.remove(drop)
            removed.append(drop)
            curve.append((len(current), mean, std))
            subsets[len(current)] = list(current)
            log.debug("bfs: removed %s, %d left, mean AUC %.4f", drop, len(current), mean)
    finally:
        if pool is not None:
            pool.shutdown()
    best_size, best_mean = None, -np.inf
    for size, m, _ in sorted(curve):
        if m > best_mean:
            best_size, best_mean = size, m
    return SelectionResult("bfs", subsets[best_size], curve=curve, removal_order=removed)


def backward_select(train: DataTable, predictors: Sequence[str], outcome: str, cv: CVConfig,
                    lr_grid: Sequence[float] = LR_C_GRID, threads: int = 1, **plan_kw) -> SelectionResult:
    folds = prepare_folds(train, predictors, outcome, cv, **plan_kw)
    return backward_select_folds(folds, lr_grid, threads=threads)
