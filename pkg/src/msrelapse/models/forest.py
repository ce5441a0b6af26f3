"""Gini decision trees and random forests with impurity-based importances.

Tree ``t`` of a forest draws every random number (bootstrap rows, candidate
features) from its own generator ``substream(seed, t)``, so a forest does not
depend on how trees are scheduled across threads, and the first ``k`` trees
of a forest are exactly the forest trained with ``n_estimators=k``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ForestParams:
    bootstrap: bool = True
    max_features: str | int | None = "sqrt"
    min_samples_leaf: int = 1
    n_estimators: int = 100

    def to_dict(self) -> dict:
        return {"bootstrap": self.bootstrap, "max_features": self.max_features,
                "min_samples_leaf": self.min_samples_leaf, "n_estimators": self.n_estimators}


def n_candidates(max_features, p: int) -> int:
    if max_features is None:
        return p
    if max_features == "sqrt":
        return max(1, int(math.floor(math.sqrt(p))))
    if isinstance(max_features, int) and max_features >= 1:
        return min(p, max_features)
    raise ValueError(f"unsupported max_features {max_features!r}")


def substream(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(t)]))


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n: np.ndarray
    n_pos: np.ndarray
    impurity_decrease: np.ndarray  # per feature, weighted by n_node / n_root

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = np.arange(X.shape[0])
        while active.size:
            f = self.feature[node[active]]
            inner = f >= 0
            active = active[inner]
            if not active.size:
                break
            cur = node[active]
            go_left = X[active, self.feature[cur]] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return node

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        leaf = self.apply(X)
        return self.n_pos[leaf] / self.n[leaf]

    def importances(self) -> np.ndarray:
        total = self.impurity_decrease.sum()
        if total <= 0:
            return np.zeros_like(self.impurity_decrease)
        return self.impurity_decrease / total

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in
                ("feature", "threshold", "left", "right", "n", "n_pos", "impurity_decrease")}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        ints = ("feature", "left", "right", "n", "n_pos")
        return cls(**{k: np.array(v, dtype=np.intp if k in ints else float) for k, v in d.items()})


def _gini(pos: float, n: float) -> float:
    return 1.0 - (pos * pos + (n - pos) ** 2) / (n * n)


def _best_split(Xn: np.ndarray, yn: np.ndarray, feats: np.ndarray, msl: int):
    """Best (feature, threshold, child score) over ``feats``; None if inadmissible.

    The score ``sum_child sum_class count^2 / n_child`` is monotone in the
    weighted impurity decrease. Near-equal scores count as ties and resolve to
    the lowest feature index, then the lowest threshold.
    """
    m = yn.size
    sub = Xn[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    sv = np.take_along_axis(sub, order, axis=0)
    left_pos = np.cumsum(yn[order], axis=0)[:-1]
    nl = np.arange(1, m, dtype=float)[:, None]
    nr = m - nl
    right_pos = yn.sum() - left_pos
    score = ((left_pos ** 2 + (nl - left_pos) ** 2) / nl
             + (right_pos ** 2 + (nr - right_pos) ** 2) / nr)
    valid = (sv[1:] > sv[:-1]) & (nl >= msl) & (nr >= msl)
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    best = score.max()
    rows, cols = np.nonzero(score >= best - TIE_RTOL * max(1.0, abs(best)))
    lo, hi = sv[rows, cols], sv[rows + 1, cols]
    thr = (lo + hi) / 2.0
    thr = np.where(thr >= hi, lo, thr)
    fidx = feats[cols]
    pick = np.lexsort((thr, fidx))[0]
    return int(fidx[pick]), float(thr[pick]), float(score[rows[pick], cols[pick]])


def train_tree(X, y, min_samples_leaf: int = 1, max_features="sqrt",
               rng: np.random.Generator | None = None) -> DecisionTree:
    """Grow a Gini tree until nodes are pure or no admissible split remains.

    At each node a random permutation of the features is walked and the first
    ``n_candidates(max_features, p)`` features that are not constant in the
    node become split candidates.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot grow a tree on zero samples")
    rng = rng if rng is not None else np.random.default_rng(0)
    k = n_candidates(max_features, p)
    msl = int(min_samples_leaf)

    feature, threshold, left, right, counts, pos = [], [], [], [], [], []
    decrease = np.zeros(p)

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(idx.size)
        pos.append(int(y[idx].sum()))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n))]
    while stack:
        node, idx = stack.pop()
        m = idx.size
        npos = pos[node]
        if npos == 0 or npos == m or m < 2 * msl:
            continue
        Xn = X[idx]
        yn = y[idx]
        nonconst = Xn.max(axis=0) > Xn.min(axis=0)
        if k >= p:
            feats = np.flatnonzero(nonconst)
        else:
            perm = rng.permutation(p)
            feats = np.sort(perm[nonconst[perm]][:k])
        if feats.size == 0:
            continue
        split = _best_split(Xn, yn, feats, msl)
        if split is None:
            continue
        f, thr, score = split
        goes_left = Xn[:, f] <= thr
        li, ri = idx[goes_left], idx[~goes_left]
        gain = score / m - (npos * npos + (m - npos) ** 2) / (m * m)
        decrease[f] += (m / n) * max(gain, 0.0)
        feature[node] = f
        threshold[node] = thr
        ln, rn = new_node(li), new_node(ri)
        left[node], right[node] = ln, rn
        stack.append((rn, ri))
        stack.append((ln, li))

    return DecisionTree(np.array(feature, dtype=np.intp), np.array(threshold),
                        np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
                        np.array(counts, dtype=np.intp), np.array(pos, dtype=np.intp), decrease)


@dataclass
class RandomForestModel:
    trees: list[DecisionTree]
    params: ForestParams
    n_features: int
    seed: int

    def tree_probas(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns, got {X.shape[-1]}")
        return np.array([t.predict_proba(X) for t in self.trees])

    def prefix(self, n_estimators: int) -> "RandomForestModel":
        """The forest made of the first ``n_estimators`` trees."""
        params = ForestParams(self.params.bootstrap, self.params.max_features,
                              self.params.min_samples_leaf, n_estimators)
        return RandomForestModel(self.trees[:n_estimators], params, self.n_features, self.seed)

    @property
    def importances(self) -> np.ndarray:
        return impurity_importances(self)

    def to_dict(self) -> dict:
        return {"kind": "random_forest", "params": self.params.to_dict(), "seed": self.seed,
                "n_features": self.n_features, "trees": [t.to_dict() for t in self.trees]}


def _grow(X, y, params: ForestParams, seed: int, t: int) -> DecisionTree:
    rng = substream(seed, t)
    if params.bootstrap:
        rows = rng.integers(0, X.shape[0], X.shape[0])
        return train_tree(X[rows], y[rows], params.min_samples_leaf, params.max_features, rng)
    return train_tree(X, y, params.min_samples_leaf, params.max_features, rng)


def train_forest(X, y, params: ForestParams, seed: int, threads: int = 1) -> RandomForestModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.unique(y).size < 2:
        raise ValueError("random forest needs both classes")
    ids = range(params.n_estimators)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(lambda t: _grow(X, y, params, seed, t), ids))
    else:
        trees = [_grow(X, y, params, seed, t) for t in ids]
    return RandomForestModel(trees, params, X.shape[1], seed)


def predict_proba_forest(forest: RandomForestModel, X) -> np.ndarray:
    return forest.tree_probas(X).mean(axis=0)


def impurity_importances(forest: RandomForestModel) -> np.ndarray:
    """Mean of per-tree normalized impurity decreases, renormalized to sum 1."""
    per_tree = np.array([t.importances() for t in forest.trees])
    mean = per_tree.mean(axis=0) if per_tree.size else np.zeros(forest.n_features)
    total = mean.sum()
    if total <= 0:
        log.warning("forest has no impurity-reducing split; importances set uniform")
        return np.full(forest.n_features, 1.0 / forest.n_features)
    return mean / total
