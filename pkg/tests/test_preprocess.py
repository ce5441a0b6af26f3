import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msrelapse.data import ColumnSpec, DataTable
from msrelapse.preprocess import (apply_mice, drop_high_missing, encoded_table, fit_categorical_modes,
                                  fit_dummy_encoding, fit_mice, fit_preprocess, fit_standardizer,
                                  impute_categorical_mode)


def num(name, cat="clinical_recent"):
    return ColumnSpec(name, "numeric", cat)


def cat(name, cat_="demographic"):
    return ColumnSpec(name, "categorical", cat_)


def test_drop_high_missing_boundary():
    n = 100
    t = DataTable([num("a"), num("b"), num("c")], {
        "a": [math.nan] * 31 + [1.0] * 69,
        "b": [math.nan] * 30 + [1.0] * 70,
        "c": np.ones(n)})
    dropped, rest = drop_high_missing(t)
    assert dropped == ["a"] and rest.columns == ["b", "c"]
    full = DataTable([num("c")], {"c": np.ones(5)})
    assert drop_high_missing(full)[1].equals(full)


def test_mode_imputation():
    t = DataTable([cat("r")], {"r": ["a", "a", "b", None]})
    modes = fit_categorical_modes(t, ["r"])
    assert list(impute_categorical_mode(modes, t).values("r")) == ["a", "a", "b", "a"]
    tie = DataTable([cat("r")], {"r": ["b", "a", None]})
    assert fit_categorical_modes(tie, ["r"])["r"] == "a"
    full = DataTable([cat("r")], {"r": ["x", "y"]})
    assert impute_categorical_mode(fit_categorical_modes(full, ["r"]), full).equals(full)


def test_dummy_encoding_drops_modal_level():
    seasons = ["Summer"] * 4 + ["Spring"] * 2 + ["Autumn"] * 2 + ["Winter"]
    dm, _ = fit_dummy_encoding(DataTable([cat("season")], {"season": seasons}), ["season"])
    assert dm["season"].dropped == "Summer"
    assert set(dm["season"].kept) == {"Spring", "Autumn", "Winter"}
    eth = ["Caucasian"] * 5 + ["Black-african", "Hispanic"]
    dm, _ = fit_dummy_encoding(DataTable([cat("ethnicity")], {"ethnicity": eth}), ["ethnicity"])
    assert dm["ethnicity"].kept == ("Black-african", "Hispanic")
    dm, _ = fit_dummy_encoding(DataTable([cat("x")], {"x": ["b", "a"]}), ["x"])
    assert dm["x"].dropped == "a"


def test_standardizer_examples():
    sc, notes = fit_standardizer(np.array([[1.0], [2.0], [3.0]]))
    assert sc.mean[0] == 2.0 and sc.std[0] == pytest.approx(math.sqrt(2 / 3))
    assert sc.transform(np.array([[2.0]]))[0, 0] == 0.0
    assert sc.transform(np.array([[4.0]]))[0, 0] == pytest.approx(2.449489742783178)
    sc, notes = fit_standardizer(np.array([[5.0], [5.0]]), ["k"])
    assert sc.transform(np.array([[7.0]]))[0, 0] == 0.0 and "constant" in notes[0]


def test_mice_complete_is_identity():
    X = np.random.default_rng(0).normal(size=(20, 3))
    assert np.array_equal(apply_mice(fit_mice(X, ["a", "b", "c"]), X), X)


def test_mice_recovers_exact_linear_relation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=200)
    X = np.column_stack([x, 2 * x])
    miss = rng.random(200) < 0.2
    X[miss, 1] = np.nan
    out = apply_mice(fit_mice(X, ["x", "y"]), X)
    assert np.max(np.abs(out[miss, 1] - 2 * x[miss])) < 1e-6


def test_mice_skips_constant_neighbour():
    rng = np.random.default_rng(2)
    x = rng.normal(size=50)
    X = np.column_stack([x, np.ones(50), 3 * x + 1])
    X[:5, 2] = np.nan
    spec = fit_mice(X, ["x", "const", "y"], k=3)
    assert 1 not in spec.neighbors[2] and spec.neighbors[2] == [0]
    out = apply_mice(spec, X)
    assert np.allclose(out[:5, 2], 3 * x[:5] + 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_mice_keeps_observed_and_is_idempotent(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 4))
    X[:, 1] += X[:, 0]
    X[rng.random(X.shape) < 0.2] = np.nan
    spec = fit_mice(X, list("abcd"))
    once = apply_mice(spec, X)
    obs = ~np.isnan(X)
    assert np.array_equal(once[obs], X[obs])
    assert not np.isnan(once).any()
    assert np.array_equal(apply_mice(spec, once), once)


def mixed_table(seed, n=40):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = a + rng.normal(scale=0.5, size=n)
    a[rng.random(n) < 0.15] = np.nan
    b[rng.random(n) < 0.15] = np.nan
    res = rng.choice(["towns", "cities", "rural"], size=n, p=[0.5, 0.3, 0.2]).astype(object)
    res[rng.random(n) < 0.1] = None
    sex = (rng.random(n) < 0.6).astype(float)
    sex[rng.random(n) < 0.1] = np.nan
    schema = [num("a"), num("b", "environmental"), cat("residence"),
              ColumnSpec("sex", "binary", "demographic"), ColumnSpec("y", "binary", "outcome")]
    return DataTable(schema, {"a": a, "b": b, "residence": list(res), "sex": sex,
                              "y": (rng.random(n) < 0.5).astype(float)})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_full_plan_properties(seed):
    t = mixed_table(seed)
    plan = fit_preprocess(t, ["a", "b", "residence", "sex"])
    X = plan.transform(t)
    assert not np.isnan(X).any()
    for c in plan.numeric:
        assert abs(X[:, plan.output_columns.index(c)].mean()) < 1e-9
    # the plan never depends on rows it is only applied to
    other = mixed_table(seed + 1)
    before = plan.to_dict()
    plan.transform(other.take(np.random.default_rng(seed).permutation(other.n_rows)))
    assert plan.to_dict() == before


def test_plan_is_fitted_on_train_only():
    t = mixed_table(5, n=60)
    train = t.take(np.arange(40))
    plan = fit_preprocess(train, ["a", "b", "residence", "sex"])
    changed = t.values("a").copy()
    changed[40:] = 1e6
    t2 = t.with_columns([num("a")], {"a": changed})
    plan2 = fit_preprocess(t2.take(np.arange(40)), ["a", "b", "residence", "sex"])
    assert plan.to_dict() == plan2.to_dict()


def test_encoded_table_keeps_numeric_gaps():
    t = mixed_table(3)
    plan = fit_preprocess(t, ["a", "b", "residence", "sex"])
    enc = encoded_table(plan, t)
    assert enc.columns == plan.output_columns
    assert enc.missing("a").any()
    assert not enc.missing("sex").any()
    assert all(n.startswith("residence_") for n in enc.columns if n not in ("a", "b", "sex"))


def test_full_predictor_schema_has_36_columns():
    # 29 non-categorical predictors plus ethnicity (3 levels), residence (3) and season (4)
    rng = np.random.default_rng(0)
    n = 200
    numeric = [f"x{i}" for i in range(29)]
    levels = {"ethnicity": ["Caucasian", "Black-african", "Hispanic"],
              "residence": ["towns", "cities", "rural"],
              "season": ["Summer", "Spring", "Autumn", "Winter"]}
    schema = [num(c) for c in numeric] + [cat(c) for c in levels]
    vals = {c: rng.normal(size=n) for c in numeric}
    for c, lv in levels.items():
        p = np.r_[0.55, np.full(len(lv) - 1, 0.45 / (len(lv) - 1))]
        vals[c] = list(rng.choice(lv, size=n, p=p))
    plan = fit_preprocess(DataTable(schema, vals), numeric + list(levels))
    assert len(plan.output_columns) == 36
    assert "season_Summer" not in plan.output_columns and "ethnicity_Caucasian" not in plan.output_columns
