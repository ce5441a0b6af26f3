import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msrelapse.data import (ColumnSpec, DataError, DataTable, SchemaError, UndefinedCorrelation,
                            correlation_matrix, missing_fraction, pearson_correlation, read_csv_table,
                            stratified_split, stratified_split_indices)

AB = [ColumnSpec("a", "numeric", "clinical_recent"), ColumnSpec("b", "categorical", "demographic")]


def test_read_csv_basic():
    t = read_csv_table("a,b\n1.5,x\n", AB)
    assert t.n_rows == 1
    assert not t.missing_mask().any()
    assert t.values("a")[0] == 1.5 and t.values("b")[0] == "x"


def test_read_csv_missing_token():
    t = read_csv_table("a,b\nNA,x\n", AB)
    assert t.missing("a")[0]
    assert not t.missing("b")[0]


def test_read_csv_parse_error_names_row_and_column():
    with pytest.raises(DataError) as err:
        read_csv_table("a,b\nabc,x\n", AB)
    assert err.value.row == 0 and err.value.column == "a"
    assert "row 0" in str(err.value) and "column a" in str(err.value)


def test_read_csv_header_order_and_errors():
    t = read_csv_table("b,a\ny,2\n", AB)
    assert t.columns == ["a", "b"] and t.values("a")[0] == 2.0
    with pytest.raises(SchemaError):
        read_csv_table("a,b,c\n1,x,2\n", AB)
    with pytest.raises(SchemaError):
        read_csv_table("a\n1\n", AB)
    with pytest.raises(SchemaError):
        read_csv_table("a,a,b\n1,1,x\n", AB)


def test_read_csv_bytes_and_custom_tokens():
    t = read_csv_table(b"a,b\n-,z\n", AB, missing_tokens={"-"})
    assert t.missing("a")[0]


def test_binary_column_rejects_other_values():
    with pytest.raises(DataError):
        DataTable([ColumnSpec("y", "binary", "outcome")], {"y": [0, 2]})


def test_outcome_must_be_binary():
    with pytest.raises((SchemaError, ValueError)):
        ColumnSpec("y", "numeric", "outcome")


def test_csv_roundtrip():
    t = DataTable(AB, {"a": [1.0, math.nan, 2.25], "b": ["x", None, "y,z"]})
    buf = io.StringIO()
    t.write_csv(buf)
    back = read_csv_table(buf.getvalue(), AB)
    assert back.equals(t)


def test_missing_fraction_examples():
    spec = [ColumnSpec("a", "numeric", "clinical_recent")]
    vals = [1.0] * 7 + [math.nan] * 3
    assert missing_fraction(DataTable(spec, {"a": vals}), "a") == pytest.approx(0.3)
    assert missing_fraction(DataTable(spec, {"a": [1.0, 2.0]}), "a") == 0.0
    assert missing_fraction(DataTable(spec, {"a": [math.nan] * 4}), "a") == 1.0


def test_pearson_examples():
    assert pearson_correlation([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    # cov = 4, var_x = var_y = 5 (sums of squares)
    assert pearson_correlation([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)
    with pytest.raises(UndefinedCorrelation):
        pearson_correlation([1, 1, 1], [1, 2, 3])


def test_pearson_pairwise_complete():
    r = pearson_correlation([1, 2, math.nan, 3], [2, 4, 100, 6])
    assert r == pytest.approx(1.0)


def test_correlation_matrix_duplicate_and_independent():
    rng = np.random.default_rng(0)
    x = rng.normal(size=10000)
    y = rng.normal(size=10000)
    spec = [ColumnSpec(n, "numeric", "environmental") for n in ("x", "x2", "y")]
    t = DataTable(spec, {"x": x, "x2": x, "y": y})
    R = correlation_matrix(t, ["x", "x2", "y"])
    assert R[0, 1] == pytest.approx(1.0)
    assert abs(R[0, 2]) < 0.05
    assert np.array_equal(R, R.T)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=20), rng.normal(size=20)
    assert abs(pearson_correlation(scale * x + shift, y) - pearson_correlation(x, y)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_correlation_matrix_properties(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 4))
    X[rng.random(X.shape) < 0.2] = np.nan
    spec = [ColumnSpec(f"c{j}", "numeric", "environmental") for j in range(4)]
    t = DataTable(spec, {f"c{j}": X[:, j] for j in range(4)})
    R = correlation_matrix(t, t.columns)
    assert np.array_equal(R, R.T, equal_nan=True)
    assert np.all(np.diag(R) == 1.0)
    assert np.all(np.abs(R[~np.isnan(R)]) <= 1 + 1e-12)


def test_split_counts_409_393():
    y = np.array([1.0] * 409 + [0.0] * 393)
    tr, te = stratified_split_indices(y, 0.30, seed=0)
    assert (tr.size, te.size) == (561, 241)
    assert y[te].sum() == 123 and (y[te] == 0).sum() == 118


def test_split_small_and_deterministic():
    spec = [ColumnSpec("y", "binary", "outcome"), ColumnSpec("x", "numeric", "clinical_recent")]
    t = DataTable(spec, {"y": [1.0] * 5 + [0.0] * 5, "x": np.arange(10.0)})
    train, test = stratified_split(t, "y", 0.2, seed=3)
    assert test.n_rows == 2 and test.values("y").sum() == 1
    again = stratified_split(t, "y", 0.2, seed=3)
    assert again[1].equals(test) and again[0].equals(train)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(2, 60), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_partition_and_stratification(n_pos, n_neg, frac, seed):
    y = np.array([1.0] * n_pos + [0.0] * n_neg)
    try:
        tr, te = stratified_split_indices(y, frac, seed)
    except DataError:
        return  # an empty side is an error, not a partition
    assert np.intersect1d(tr, te).size == 0
    assert np.array_equal(np.sort(np.r_[tr, te]), np.arange(y.size))
    for cls, n in ((1.0, n_pos), (0.0, n_neg)):
        assert abs((y[te] == cls).sum() - frac * n) <= 1.0
