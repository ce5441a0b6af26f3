"""Fit-on-train / apply-anywhere preprocessing.

The full plan, in order: drop columns with too many missing cells, fill
categorical and binary gaps with the training mode, dummy-encode categoricals
(modal level dropped), impute numerics by chained OLS regressions on their
most correlated columns, and standardize numerics.
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ColumnSpec, DataError, DataTable, correlation_matrix_array, missing_fraction

log = logging.getLogger(__name__)


def drop_high_missing(train: DataTable, columns: Sequence[str] | None = None,
                      threshold: float = 0.30) -> tuple[list[str], DataTable]:
    """Drop columns whose missing fraction strictly exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise DataError(f"threshold must be in (0, 1), got {threshold}")
    columns = train.columns if columns is None else columns
    dropped = [c for c in columns if missing_fraction(train, c) > threshold]
    return dropped, train.drop(dropped)


def _mode(values: Sequence[str]) -> str:
    counts = Counter(values)
    top = max(counts.values())
    return min(v for v, c in counts.items() if c == top)


def fit_categorical_modes(train: DataTable, columns: Sequence[str]) -> dict[str, str | float]:
    modes: dict[str, str | float] = {}
    for c in columns:
        obs = train.values(c)[~train.missing(c)]
        if obs.size == 0:
            raise DataError(f"column {c!r} has no observed value to take a mode from", column=c)
        if train.spec(c).kind == "categorical":
            modes[c] = _mode(list(obs))
        else:
            # binary: compare as strings so ties resolve to 0
            modes[c] = float(_mode(["1" if v == 1.0 else "0" for v in obs]))
    return modes


def impute_categorical_mode(modes: Mapping[str, str | float], table: DataTable) -> DataTable:
    specs, vals = [], {}
    for c, mode in modes.items():
        if c not in table:
            continue
        arr = table.values(c).copy()
        arr[table.missing(c)] = mode
        specs.append(table.spec(c))
        vals[c] = arr
    return table.with_columns(specs, vals)


@dataclass(frozen=True)
class DummySpec:
    kept: tuple[str, ...]
    dropped: str


def fit_dummy_encoding(train: DataTable, columns: Sequence[str]) -> tuple[dict[str, DummySpec], list[str]]:
    """Per categorical column: keep a 0/1 indicator for every non-modal level.

    Returns the map and diagnostics; single-level columns are left out.
    """
    out, notes = {}, []
    for c in columns:
        obs = list(train.values(c)[~train.missing(c)])
        levels = sorted(set(obs))
        if len(levels) < 2:
            notes.append(f"column {c!r} has fewer than 2 observed levels; dropped")
            continue
        modal = _mode(obs)
        out[c] = DummySpec(tuple(lv for lv in levels if lv != modal), modal)
    return out, notes


def dummy_name(column: str, level: str) -> str:
    return f"{column}_{level}"


def apply_dummies(dummy_map: Mapping[str, DummySpec], column: str, values: np.ndarray) -> dict[str, np.ndarray]:
    spec = dummy_map[column]
    return {dummy_name(column, lv): np.array([1.0 if v == lv else 0.0 for v in values])
            for lv in spec.kept}


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        Z = (X - self.mean) / safe
        Z[:, self.std == 0] = 0.0
        return Z


def fit_standardizer(X: np.ndarray, names: Sequence[str] | None = None) -> tuple[Scaler, list[str]]:
    """Column mean and population std over observed (non-NaN) values."""
    notes = []
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(X, axis=0) if X.shape[0] else np.zeros(X.shape[1])
        std = np.nanstd(X, axis=0) if X.shape[0] else np.zeros(X.shape[1])
    mean = np.nan_to_num(mean)
    std = np.nan_to_num(std)
    for j in np.flatnonzero(std == 0):
        label = names[j] if names is not None else str(j)
        notes.append(f"column {label!r} is constant on the training data; emitted as zeros")
    return Scaler(mean, std), notes


def apply_standardizer(scaler: Scaler, X: np.ndarray) -> np.ndarray:
    return scaler.transform(X)


@dataclass
class MiceSpec:
    """Frozen chained-equation regressions, one per numeric column."""

    names: list[str]
    means: np.ndarray
    scales: np.ndarray
    neighbors: list[list[int]]
    coefs: list[np.ndarray | None]  # None -> fill with the training mean
    max_sweeps: int = 10
    tol: float = 1e-3
    notes: list[str] = field(default_factory=list)
    sweeps_run: int = 0


def _nearest_by_correlation(R: np.ndarray, j: int, k: int) -> list[int]:
    cand = [(-abs(R[j, i]), i) for i in range(R.shape[0]) if i != j and not math.isnan(R[j, i])]
    return [i for _, i in sorted(cand)[:k]]


def _ols(A: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    design = np.column_stack([np.ones(A.shape[0]), A])
    if design.shape[0] < design.shape[1]:
        return None
    coef, _, rank, _ = np.linalg.lstsq(design, b, rcond=None)
    if rank < design.shape[1]:
        return None
    return coef


def _predict(coef: np.ndarray, A: np.ndarray) -> np.ndarray:
    return coef[0] + A @ coef[1:]


def fit_mice(X: np.ndarray, names: Sequence[str], k: int = 3, max_sweeps: int = 10,
             tol: float = 1e-3) -> MiceSpec:
    """Chained OLS imputation on the ``k`` most |r|-correlated columns.

    Neighbours come from the pairwise-complete correlation matrix of the
    training data and stay fixed. Missing cells start at the column mean and
    are re-predicted column by column until the largest change (in units of
    the column's observed std) drops below ``tol`` or ``max_sweeps`` is hit.
    """
    X = np.array(X, dtype=float)
    n, p = X.shape
    miss = np.isnan(X)
    with np.errstate(invalid="ignore"):
        means = np.nan_to_num(np.nanmean(X, axis=0)) if n else np.zeros(p)
        scales = np.nan_to_num(np.nanstd(X, axis=0)) if n else np.ones(p)
    scales = np.where(scales > 0, scales, 1.0)
    R = correlation_matrix_array(X)
    neighbors = [_nearest_by_correlation(R, j, k) for j in range(p)]
    notes: list[str] = []

    Xi = np.where(miss, means, X)
    coefs: list[np.ndarray | None] = [None] * p
    targets = [j for j in range(p) if miss[:, j].any() and (~miss[:, j]).any()]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        change = 0.0
        for j in targets:
            coef = _fit_column(Xi, miss, j, neighbors[j])
            coefs[j] = coef
            rows = miss[:, j]
            new = np.full(rows.sum(), means[j]) if coef is None else _predict(coef, Xi[rows][:, neighbors[j]])
            change = max(change, float(np.max(np.abs(new - Xi[rows, j]))) / scales[j])
            Xi[rows, j] = new
        if change < tol:
            break
    for j in range(p):
        if j not in targets:
            coefs[j] = _fit_column(Xi, miss, j, neighbors[j])
        if coefs[j] is None and neighbors[j]:
            notes.append(f"column {names[j]!r}: singular imputation regression; mean fallback")
    for msg in notes:
        log.info(msg)
    return MiceSpec(list(names), means, scales, neighbors, coefs, max_sweeps, tol, notes, sweeps)


def _fit_column(Xi: np.ndarray, miss: np.ndarray, j: int, nb: list[int]) -> np.ndarray | None:
    if not nb:
        return None
    obs = ~miss[:, j]
    return _ols(Xi[obs][:, nb], Xi[obs, j])


def apply_mice(spec: MiceSpec, X: np.ndarray) -> np.ndarray:
    """Impute with the frozen regressions; observed cells are never changed."""
    X = np.array(X, dtype=float)
    miss = np.isnan(X)
    if not miss.any():
        return X
    Xi = np.where(miss, spec.means, X)
    targets = [j for j in range(X.shape[1]) if miss[:, j].any()]
    for _ in range(spec.max_sweeps):
        change = 0.0
        for j in targets:
            coef = spec.coefs[j]
            if coef is None:
                continue
            rows = miss[:, j]
            new = _predict(coef, Xi[rows][:, spec.neighbors[j]])
            change = max(change, float(np.max(np.abs(new - Xi[rows, j]))) / spec.scales[j])
            Xi[rows, j] = new
        if change < spec.tol:
            break
    return Xi


@dataclass
class PreprocessPlan:
    """Everything learned from a training table; apply with :meth:`transform`."""

    predictors: list[str]
    dropped_columns: list[str]
    numeric: list[str]
    binary: list[str]
    categorical: list[str]
    cat_modes: dict[str, str | float]
    dummy_map: dict[str, DummySpec]
    mice: MiceSpec
    scaler: Scaler
    output_columns: list[str]
    notes: list[str] = field(default_factory=list)

    def encode(self, table: DataTable) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Numeric block (gaps still NaN) and the filled binary/dummy columns by name."""
        filled = impute_categorical_mode(self.cat_modes, table.select(self.kept_columns))
        num = filled.numeric_matrix(self.numeric)
        blocks: dict[str, np.ndarray] = {}
        for c in self.binary:
            blocks[c] = filled.values(c).astype(float)
        for c in self.categorical:
            if c in self.dummy_map:
                blocks.update(apply_dummies(self.dummy_map, c, filled.values(c)))
        return num, blocks

    @property
    def kept_columns(self) -> list[str]:
        return [c for c in self.predictors if c not in set(self.dropped_columns)]

    def transform(self, table: DataTable) -> np.ndarray:
        num, blocks = self.encode(table)
        num = self.scaler.transform(apply_mice(self.mice, num))
        pos = {c: j for j, c in enumerate(self.numeric)}
        cols = []
        for name in self.output_columns:
            cols.append(num[:, pos[name]] if name in pos else blocks[name])
        if not cols:
            return np.zeros((table.n_rows, 0))
        return np.column_stack(cols)

    def to_dict(self) -> dict:
        return {
            "dropped_columns": list(self.dropped_columns),
            "cat_modes": dict(self.cat_modes),
            "dummy_map": {c: {"kept": list(d.kept), "dropped": d.dropped} for c, d in self.dummy_map.items()},
            "scaler": {c: {"mean": float(m), "std": float(s)}
                       for c, m, s in zip(self.numeric, self.scaler.mean, self.scaler.std)},
            "mice": {c: {"neighbors": [self.numeric[i] for i in nb],
                         "coef": None if coef is None else [float(v) for v in coef]}
                     for c, nb, coef in zip(self.numeric, self.mice.neighbors, self.mice.coefs)},
            "output_columns": list(self.output_columns),
        }


def fit_preprocess(train: DataTable, predictors: Sequence[str], *, missing_threshold: float = 0.30,
                   mice_k: int = 3, mice_sweeps: int = 10, mice_tol: float = 1e-3) -> PreprocessPlan:
    notes: list[str] = []
    dropped, _ = drop_high_missing(train, predictors, missing_threshold)
    notes += [f"column {c!r} dropped: missing fraction above {missing_threshold}" for c in dropped]
    kept = [c for c in predictors if c not in set(dropped)]
    kinds = {c: train.spec(c).kind for c in kept}
    numeric = [c for c in kept if kinds[c] == "numeric"]
    binary = [c for c in kept if kinds[c] == "binary"]
    categorical = [c for c in kept if kinds[c] == "categorical"]

    modes = fit_categorical_modes(train, binary + categorical)
    filled = impute_categorical_mode(modes, train)
    dummy_map, dnotes = fit_dummy_encoding(filled, categorical)
    notes += dnotes

    num = train.numeric_matrix(numeric)
    mice = fit_mice(num, numeric, k=mice_k, max_sweeps=mice_sweeps, tol=mice_tol)
    imputed = apply_mice(mice, num)
    scaler, snotes = fit_standardizer(imputed, numeric)
    notes += snotes + mice.notes

    output = []
    for c in kept:
        if kinds[c] == "categorical":
            if c in dummy_map:
                output += [dummy_name(c, lv) for lv in dummy_map[c].kept]
        else:
            output.append(c)
    for msg in notes:
        log.info(msg)
    return PreprocessPlan(list(predictors), dropped, numeric, binary, categorical, modes,
                          dummy_map, mice, scaler, output, notes)


def encoded_table(plan: PreprocessPlan, table: DataTable) -> DataTable:
    """Dummy-encoded, categorical-imputed view with numeric gaps still missing.

    Used by correlation screening, which needs raw missingness.
    """
    num, blocks = plan.encode(table)
    pos = {c: j for j, c in enumerate(plan.numeric)}
    source = {dummy_name(c, lv): c for c, d in plan.dummy_map.items() for lv in d.kept}
    specs, vals = [], {}
    for name in plan.output_columns:
        if name in pos:
            specs.append(ColumnSpec(name, "numeric", table.spec(name).category))
            vals[name] = num[:, pos[name]]
        else:
            base = name if name in table else source[name]
            cat = table.spec(base).category
            specs.append(ColumnSpec(name, "binary", cat))
            vals[name] = blocks[name]
    return DataTable(specs, vals)
