"""Typed tabular container, CSV ingestion, correlation and stratified splitting.

Every pipeline stage exchanges :class:`DataTable` objects. Values are kept in
numpy arrays, one per column, with an explicit boolean missingness mask:

* ``numeric`` and ``binary`` columns are ``float64``; missing cells hold NaN.
* ``categorical`` columns are ``object`` arrays of ``str``; missing cells hold None.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

KINDS = ("numeric", "categorical", "binary")
CATEGORIES = (
    "demographic",
    "clinical_onset",
    "clinical_recent",
    "clinical_current_week",
    "environmental",
    "meta",
    "outcome",
)
DEFAULT_MISSING_TOKENS = frozenset({"", "NA", "NaN"})

_TRUE_TOKENS = {"1", "1.0", "true", "True", "TRUE", "yes"}
_FALSE_TOKENS = {"0", "0.0", "false", "False", "FALSE", "no"}


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaError(DataError):
    """Schema/header mismatch or an invalid column specification."""


class UndefinedCorrelation(DataError):
    """Correlation requested on too few complete pairs or a constant column."""


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    kind: str = "numeric"
    category: str = "meta"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.category not in CATEGORIES:
            raise SchemaError(f"column {self.name!r}: unknown category {self.category!r}")
        if self.category == "outcome" and self.kind != "binary":
            raise SchemaError(f"outcome column {self.name!r} must be binary")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "category": self.category}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnSpec":
        return cls(d["name"], d.get("kind", "numeric"), d.get("category", "meta"))


def _check_schema(schema: Sequence[ColumnSpec]) -> None:
    seen = set()
    for spec in schema:
        if spec.name in seen:
            raise SchemaError(f"duplicate column name {spec.name!r}")
        seen.add(spec.name)


def _empty_column(kind: str, n: int) -> np.ndarray:
    if kind == "categorical":
        return np.full(n, None, dtype=object)
    return np.full(n, np.nan)


class DataTable:
    """Immutable column store with an explicit missingness mask.

    Construct with ``DataTable(schema, values)``; the mask is derived from NaN
    (numeric/binary) or None (categorical) cells. Arrays are copied and frozen.
    """

    def __init__(self, schema: Sequence[ColumnSpec], values: Mapping[str, Sequence]):
        schema = list(schema)
        _check_schema(schema)
        self._schema = tuple(schema)
        self._index = {spec.name: i for i, spec in enumerate(schema)}
        self._values: dict[str, np.ndarray] = {}
        self._mask: dict[str, np.ndarray] = {}
        n = None
        for spec in schema:
            if spec.name not in values:
                raise SchemaError(f"no values supplied for column {spec.name!r}")
            raw = values[spec.name]
            if spec.kind == "categorical":
                arr = np.empty(len(raw), dtype=object)
                for i, v in enumerate(raw):
                    arr[i] = None if v is None else str(v)
                mask = np.array([v is None for v in arr], dtype=bool)
            else:
                arr = np.array(raw, dtype=float).reshape(-1)
                mask = np.isnan(arr)
                if spec.kind == "binary":
                    observed = arr[~mask]
                    if not np.all((observed == 0.0) | (observed == 1.0)):
                        raise DataError(f"binary column {spec.name!r} holds values other than 0/1",
                                        column=spec.name)
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise DataError(f"column {spec.name!r} has {len(arr)} rows, expected {n}",
                                column=spec.name)
            arr.setflags(write=False)
            mask.setflags(write=False)
            self._values[spec.name] = arr
            self._mask[spec.name] = mask
        self._n = 0 if n is None else n

    # -- introspection -----------------------------------------------------
    @property
    def schema(self) -> tuple[ColumnSpec, ...]:
        return self._schema

    @property
    def columns(self) -> list[str]:
        return [s.name for s in self._schema]

    @property
    def n_rows(self) -> int:
        return self._n

    def __len__(self) -> int:
        return self._n

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def spec(self, name: str) -> ColumnSpec:
        try:
            return self._schema[self._index[name]]
        except KeyError:
            raise SchemaError(f"unknown column {name!r}", column=name) from None

    def values(self, name: str) -> np.ndarray:
        self.spec(name)
        return self._values[name]

    def missing(self, name: str) -> np.ndarray:
        self.spec(name)
        return self._mask[name]

    def missing_mask(self) -> np.ndarray:
        """n x p boolean matrix in schema order."""
        if not self._schema:
            return np.zeros((self._n, 0), dtype=bool)
        return np.column_stack([self._mask[s.name] for s in self._schema])

    def columns_where(self, *, kind: str | None = None, category: str | None = None,
                      exclude_categories: Iterable[str] = ()) -> list[str]:
        excluded = set(exclude_categories)
        return [s.name for s in self._schema
                if (kind is None or s.kind == kind)
                and (category is None or s.category == category)
                and s.category not in excluded]

    # -- derivation --------------------------------------------------------
    def take(self, rows: Sequence[int] | np.ndarray) -> "DataTable":
        rows = np.asarray(rows, dtype=int)
        return DataTable(self._schema, {s.name: self._values[s.name][rows] for s in self._schema})

    def select(self, names: Sequence[str]) -> "DataTable":
        specs = [self.spec(n) for n in names]
        return DataTable(specs, {n: self._values[n] for n in names})

    def drop(self, names: Iterable[str]) -> "DataTable":
        gone = set(names)
        return self.select([c for c in self.columns if c not in gone])

    def with_columns(self, specs: Sequence[ColumnSpec], values: Mapping[str, Sequence]) -> "DataTable":
        """Return a copy with columns added or replaced (replacements keep position)."""
        new = {s.name: s for s in specs}
        schema = [new.pop(s.name, s) for s in self._schema] + list(new.values())
        merged = {s.name: self._values[s.name] for s in self._schema}
        merged.update(values)
        return DataTable(schema, merged)

    def numeric_matrix(self, names: Sequence[str]) -> np.ndarray:
        """Float matrix of numeric/binary columns, NaN where missing."""
        cols = []
        for name in names:
            if self.spec(name).kind == "categorical":
                raise SchemaError(f"column {name!r} is categorical", column=name)
            cols.append(self._values[name])
        if not cols:
            return np.zeros((self._n, 0))
        return np.column_stack(cols).astype(float)

    def rows(self) -> Iterable[dict]:
        for i in range(self._n):
            yield {s.name: self._cell(s, i) for s in self._schema}

    def _cell(self, spec: ColumnSpec, i: int):
        if self._mask[spec.name][i]:
            return None
        v = self._values[spec.name][i]
        return v if spec.kind == "categorical" else float(v)

    def equals(self, other: "DataTable") -> bool:
        if self._schema != other._schema or self._n != other._n:
            return False
        for s in self._schema:
            if not np.array_equal(self._mask[s.name], other._mask[s.name]):
                return False
            a, b = self._values[s.name], other._values[s.name]
            keep = ~self._mask[s.name]
            if s.kind == "categorical":
                if list(a[keep]) != list(b[keep]):
                    return False
            elif not np.array_equal(a[keep], b[keep]):
                return False
        return True

    def __repr__(self) -> str:
        return f"DataTable({self._n} rows x {len(self._schema)} columns)"

    # -- serialization -----------------------------------------------------
    def write_csv(self, stream: IO[str]) -> None:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(self.columns)
        for i in range(self._n):
            writer.writerow([_format_cell(s, self._values[s.name][i], self._mask[s.name][i])
                             for s in self._schema])

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _format_cell(spec: ColumnSpec, value, missing: bool) -> str:
    if missing:
        return ""
    if spec.kind == "categorical":
        return value
    if spec.kind == "binary":
        return "1" if value == 1.0 else "0"
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def read_csv_table(source: IO | str | bytes, schema: Sequence[ColumnSpec],
                   missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS) -> DataTable:
    """Parse a header-row CSV into a :class:`DataTable`.

    Header order need not match the schema order; every header must be a
    schema column and vice versa. Numeric parse failures raise
    :class:`DataError` carrying the 0-based data row and the column name.
    """
    _check_schema(schema)
    if isinstance(source, (bytes, bytearray)):
        source = io.StringIO(source.decode("utf-8"))
    elif isinstance(source, str):
        source = io.StringIO(source)
    else:
        probe = source.read()
        source = io.StringIO(probe.decode("utf-8") if isinstance(probe, (bytes, bytearray)) else probe)
    tokens = set(missing_tokens)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty CSV: no header row") from None
    by_name = {s.name: s for s in schema}
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise SchemaError(f"duplicate header name(s): {', '.join(dup)}")
    for h in header:
        if h not in by_name:
            raise SchemaError(f"unknown header name {h!r}", column=h)
    absent = [s.name for s in schema if s.name not in header]
    if absent:
        raise SchemaError(f"header lacks schema column(s): {', '.join(absent)}")

    cols: dict[str, list] = {h: [] for h in header}
    specs = [by_name[h] for h in header]
    interned: dict[str, str] = {}
    for r, record in enumerate(reader):
        if not record:
            continue
        if len(record) != len(header):
            raise DataError(f"row {r}: expected {len(header)} fields, got {len(record)}", row=r)
        for spec, cell in zip(specs, record):
            cols[spec.name].append(_parse_cell(spec, cell, tokens, interned, r))
    return DataTable(schema, cols)


def _parse_cell(spec: ColumnSpec, cell: str, tokens: set, interned: dict, row: int):
    if cell in tokens:
        return None if spec.kind == "categorical" else math.nan
    if spec.kind == "categorical":
        return interned.setdefault(cell, cell)
    if spec.kind == "binary":
        if cell in _TRUE_TOKENS:
            return 1.0
        if cell in _FALSE_TOKENS:
            return 0.0
        raise DataError(f"row {row}, column {spec.name}: {cell!r} is not a binary value",
                        row=row, column=spec.name)
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"row {row}, column {spec.name}: cannot parse {cell!r} as a number",
                        row=row, column=spec.name) from None
    if math.isnan(value):
        return math.nan
    return value


def missing_fraction(table: DataTable, column: str) -> float:
    mask = table.missing(column)
    if table.n_rows == 0:
        raise DataError("missing_fraction on an empty table")
    return float(mask.sum()) / table.n_rows


def pearson_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson r over pairwise-complete entries (NaN = missing)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise DataError("pearson_correlation: length mismatch")
    keep = ~(np.isnan(x) | np.isnan(y))
    if keep.sum() < 2:
        raise UndefinedCorrelation("fewer than 2 complete pairs")
    xc = x[keep] - x[keep].mean()
    yc = y[keep] - y[keep].mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def correlation_matrix(table: DataTable, columns: Sequence[str]) -> np.ndarray:
    """Pairwise-complete Pearson matrix; undefined off-diagonal entries are NaN.

    Binary columns take part as 0/1. The diagonal is exactly 1.
    """
    X = table.numeric_matrix(columns)
    return correlation_matrix_array(X)


def correlation_matrix_array(X: np.ndarray) -> np.ndarray:
    p = X.shape[1]
    R = np.eye(p)
    for i in range(p):
        for j in range(i + 1, p):
            try:
                r = pearson_correlation(X[:, i], X[:, j])
            except UndefinedCorrelation:
                r = math.nan
            R[i, j] = R[j, i] = r
    return R


def stratified_split_indices(labels: Sequence[float], test_fraction: float,
                             seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of a per-class round-half-up stratified split (sorted)."""
    labels = np.asarray(labels, dtype=float)
    if np.isnan(labels).any():
        raise DataError("stratified_split: outcome has missing values")
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test = []
    for cls in (0.0, 1.0):
        idx = np.flatnonzero(labels == cls)
        if idx.size == 0:
            raise DataError(f"stratified_split: class {int(cls)} has no rows")
        n_test = math.floor(idx.size * test_fraction + 0.5)
        test.extend(rng.permutation(idx)[:n_test].tolist())
    test_idx = np.sort(np.array(test, dtype=int))
    train_idx = np.setdiff1d(np.arange(labels.size), test_idx)
    if test_idx.size == 0 or train_idx.size == 0:
        raise DataError("stratified_split: test_fraction yields an empty train or test set")
    return train_idx, test_idx


def stratified_split(table: DataTable, outcome: str, test_fraction: float,
                     seed: int) -> tuple[DataTable, DataTable]:
    if table.spec(outcome).kind != "binary":
        raise SchemaError(f"outcome {outcome!r} must be binary")
    train_idx, test_idx = stratified_split_indices(table.values(outcome), test_fraction, seed)
    return table.take(train_idx), table.take(test_idx)
