"""Stratified folds, per-fold preprocessing and grid search over AUC-ROC.

A fold's preprocessing plan is fitted on that fold's training rows only. The
plan does not depend on model hyperparameters or on which encoded columns a
model later uses, so :func:`prepare_folds` fits it once per fold and every
grid cell or feature subset reuses the transformed matrices.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DataError, DataTable
from .metrics import roc_auc
from .models import ForestParams, train_forest, train_logistic
from .models.logistic import predict_proba_logistic
from .preprocess import PreprocessPlan, fit_preprocess

LR_C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)
RF_BOOTSTRAP = (True, False)
RF_MAX_FEATURES = ("sqrt",)
RF_MIN_SAMPLES_LEAF = (2, 4, 8, 18)
RF_N_ESTIMATORS = (50, 100, 200, 350, 500, 650, 800, 950)


@dataclass(frozen=True)
class CVConfig:
    k: int = 4
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least 2 folds")


@dataclass(frozen=True)
class GridSpec:
    lr_C: tuple = LR_C_GRID
    rf_bootstrap: tuple = RF_BOOTSTRAP
    rf_max_features: tuple = RF_MAX_FEATURES
    rf_min_samples_leaf: tuple = RF_MIN_SAMPLES_LEAF
    rf_n_estimators: tuple = RF_N_ESTIMATORS

    def __post_init__(self):
        for name in ("lr_C", "rf_bootstrap", "rf_max_features", "rf_min_samples_leaf", "rf_n_estimators"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"grid axis {name} is empty")

    def lr_cells(self) -> list[dict]:
        return [{"C": float(c)} for c in sorted(self.lr_C)]

    def rf_cells(self) -> list[dict]:
        return [{"bootstrap": b, "max_features": mf, "min_samples_leaf": int(msl), "n_estimators": int(ne)}
                for b, mf, msl, ne in itertools.product(self.rf_bootstrap, self.rf_max_features,
                                                        self.rf_min_samples_leaf, self.rf_n_estimators)]

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in
                ("lr_C", "rf_bootstrap", "rf_max_features", "rf_min_samples_leaf", "rf_n_estimators")}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**{k: tuple(v) for k, v in d.items()})


def kfold_indices(n: int, labels: Sequence[float], k: int = 4, seed: int = 0,
                  stratified: bool = True) -> list[np.ndarray]:
    """Per class: seeded shuffle, then deal rows round-robin into ``k`` folds."""
    y = np.asarray(labels, dtype=float)
    if y.size != n:
        raise DataError("label count does not match n")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    groups = [np.flatnonzero(y == c) for c in (0.0, 1.0)] if stratified else [np.arange(n)]
    offset = 0
    for idx in groups:
        if stratified and idx.size < k:
            raise DataError(f"a class has {idx.size} rows, fewer than {k} folds")
        for j, row in enumerate(rng.permutation(idx)):
            folds[(offset + j) % k].append(int(row))
        offset += idx.size
    return [np.sort(np.array(f, dtype=int)) for f in folds]


@dataclass
class PreparedFold:
    plan: PreprocessPlan
    train_rows: np.ndarray
    valid_rows: np.ndarray
    X_train: np.ndarray
    y_train: np.ndarray
    X_valid: np.ndarray
    y_valid: np.ndarray

    @property
    def columns(self) -> list[str]:
        return self.plan.output_columns

    def column_index(self, selected: Sequence[str] | None) -> np.ndarray:
        if selected is None:
            return np.arange(len(self.columns))
        keep = set(selected)
        return np.array([j for j, c in enumerate(self.columns) if c in keep], dtype=int)


def prepare_folds(train: DataTable, predictors: Sequence[str], outcome: str,
                  cv: CVConfig, **plan_kw) -> list[PreparedFold]:
    y = train.values(outcome)
    folds = kfold_indices(train.n_rows, y, cv.k, cv.seed, cv.stratified)
    out = []
    for valid in folds:
        tr = np.setdiff1d(np.arange(train.n_rows), valid)
        if np.unique(y[tr]).size < 2 or np.unique(y[valid]).size < 2:
            raise DataError("cross-validation infeasible: a fold lacks a class")
        fit_part = train.take(tr)
        plan = fit_preprocess(fit_part, predictors, **plan_kw)
        out.append(PreparedFold(plan, tr, valid, plan.transform(fit_part), y[tr],
                                plan.transform(train.take(valid)), y[valid]))
    return out


@dataclass
class GridResult:
    best_params: dict
    best_mean: float
    best_std: float
    cells: list[dict] = field(default_factory=list)  # params, mean, std, fold_scores

    def to_dict(self) -> dict:
        return {"best_params": self.best_params, "best_mean": self.best_mean,
                "best_std": self.best_std, "cells": self.cells}


def _pick(cells: list[dict]) -> GridResult:
    best = None
    for cell in cells:  # strict > keeps the first of equal means
        if best is None or cell["mean"] > best["mean"]:
            best = cell
    return GridResult(dict(best["params"]), best["mean"], best["std"], cells)


def lr_fold_scores(folds: Sequence[PreparedFold], C: float, selected: Sequence[str] | None = None) -> list[float]:
    scores = []
    for f in folds:
        cols = f.column_index(selected)
        model = train_logistic(f.X_train[:, cols], f.y_train, C)
        scores.append(roc_auc(predict_proba_logistic(model, f.X_valid[:, cols]), f.y_valid))
    return scores


def grid_search_lr(folds: Sequence[PreparedFold], grid: GridSpec,
                   selected: Sequence[str] | None = None) -> GridResult:
    cells = []
    for params in grid.lr_cells():
        s = lr_fold_scores(folds, params["C"], selected)
        cells.append({"params": params, "mean": float(np.mean(s)), "std": float(np.std(s)),
                      "fold_scores": s})
    return _pick(cells)


def grid_search_rf(folds: Sequence[PreparedFold], grid: GridSpec, seed: int,
                   selected: Sequence[str] | None = None, threads: int = 1) -> GridResult:
    """RF grid search; the largest forest per setting serves all its tree-count prefixes."""
    cells = grid.rf_cells()
    n_max = max(c["n_estimators"] for c in cells)
    fold_scores: dict[tuple, list[float]] = {}
    for f in folds:
        cols = f.column_index(selected)
        Xtr, Xva = f.X_train[:, cols], f.X_valid[:, cols]
        shapes = {(c["bootstrap"], c["max_features"], c["min_samples_leaf"]) for c in cells}
        for b, mf, msl in sorted(shapes, key=str):
            forest = train_forest(Xtr, f.y_train, ForestParams(b, mf, msl, n_max), seed, threads)
            running = np.cumsum(forest.tree_probas(Xva), axis=0)
            for c in cells:
                if (c["bootstrap"], c["max_features"], c["min_samples_leaf"]) != (b, mf, msl):
                    continue
                ne = c["n_estimators"]
                key = (b, mf, msl, ne)
                fold_scores.setdefault(key, []).append(roc_auc(running[ne - 1] / ne, f.y_valid))
    out = []
    for c in cells:
        s = fold_scores[(c["bootstrap"], c["max_features"], c["min_samples_leaf"], c["n_estimators"])]
        out.append({"params": c, "mean": float(np.mean(s)), "std": float(np.std(s)), "fold_scores": s})
    return _pick(out)


def grid_search(folds: Sequence[PreparedFold], model: str, grid: GridSpec, seed: int = 0,
                selected: Sequence[str] | None = None, threads: int = 1) -> GridResult:
    """Best cell by mean fold AUC-ROC; ties keep the first cell in grid order."""
    if model == "LR":
        return grid_search_lr(folds, grid, selected)
    if model == "RF":
        return grid_search_rf(folds, grid, seed, selected, threads)
    raise ValueError(f"unknown model {model!r}")
