import json
import math

import numpy as np
import pytest
from scipy.stats import norm

from msrelapse.cli import load_config, load_cohort
from msrelapse.experiment import default_predictors
from msrelapse.models import ForestParams, train_forest
from msrelapse.preprocess import fit_preprocess
from msrelapse.synthetic import (SpecError, SyntheticSpec, VariableSpec, bayes_optimal_auc, default_variables,
                                 expected_case_rate, generate_cohort, null_spec, signal_spec, weighted_auc)
from helpers import synth_to_cohort


def tiny(**kw):
    return SyntheticSpec(n_patients=40, last_start_week=80, n_stations=3, n_postcodes=10, **kw)


def test_same_seed_same_dataset():
    a, b = generate_cohort(tiny(seed=3)), generate_cohort(tiny(seed=3))
    assert a.patients == b.patients and a.relapses == b.relapses
    for s, t in zip(a.stations, b.stations):
        for var in s.series:
            assert s.series[var][0] == t.series[var][0]
            assert np.array_equal(s.series[var][1], t.series[var][1], equal_nan=True)
    c = generate_cohort(tiny(seed=4))
    assert c.patients != a.patients


def test_missing_rate_is_honoured():
    ds = generate_cohort(tiny(seed=1, missing_rate=0.2, station_gap_rate=0.0))
    vals = np.concatenate([s.series["pm10"][1] for s in ds.stations])
    assert abs(np.isnan(vals).mean() - 0.2) < 0.02


def test_invalid_specs_are_named():
    with pytest.raises(SpecError, match="base_hazard"):
        SyntheticSpec(base_hazard=1.0).validate()
    with pytest.raises(SpecError, match="missing_rate"):
        SyntheticSpec(missing_rate=-0.1).validate()
    with pytest.raises(SpecError, match="non-finite"):
        SyntheticSpec(variables=[VariableSpec("pm10", 1.0, 1.0, coef=math.inf)], thresholds={}).validate()
    with pytest.raises(SpecError, match="bogus"):
        SyntheticSpec.from_dict({"bogus": 1})


def test_spec_roundtrip():
    s = signal_spec(seed=9)
    assert SyntheticSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_weighted_auc_matches_unweighted_auc():
    from oracles import auc_pairs

    rng = np.random.default_rng(0)
    s = rng.integers(0, 5, 30).astype(float)
    y = (rng.random(30) < 0.5).astype(float)
    y[:2] = [0, 1]
    assert weighted_auc(s, y, 1 - y) == pytest.approx(auc_pairs(s, y), abs=1e-12)


def test_bayes_auc_null_is_half():
    assert abs(bayes_optimal_auc(null_spec()) - 0.5) <= 0.005


def test_bayes_auc_unit_coefficient_matches_binormal_closed_form():
    # rare events tilt the case law of a standard normal score to N(1, 1)
    spec = SyntheticSpec(base_hazard=1e-4, missing_rate=0.0, thresholds={},
                         variables=[VariableSpec("x", 0.0, 1.0, 0.0, 1.0)])
    assert norm.cdf(1 / math.sqrt(2)) == pytest.approx(0.760, abs=5e-4)
    assert abs(bayes_optimal_auc(spec) - norm.cdf(1 / math.sqrt(2))) <= 0.005


def test_bayes_auc_monotone_in_coefficient_scale():
    vals = [bayes_optimal_auc(signal_spec(s), n_mc=100_000) for s in (0.25, 0.5, 1.0, 2.0)]
    assert all(b >= a - 0.005 for a, b in zip(vals, vals[1:]))


def test_default_design_targets_auc_075():
    assert abs(bayes_optimal_auc(SyntheticSpec()) - 0.75) <= 0.01


def test_case_rate_tracks_hazard():
    spec = SyntheticSpec(n_patients=1500, last_start_week=200, seed=2)
    ds = generate_cohort(spec)
    rate = sum(len(v) for v in ds.relapses.values()) / (spec.n_patients * spec.follow_up_weeks)
    expected = expected_case_rate(spec)
    sd = math.sqrt(expected / (spec.n_patients * spec.follow_up_weeks))
    assert abs(rate - expected) < 4 * sd


def test_strong_feature_tops_forest_importance(tmp_path):
    # no threshold for pm10: its ratio column would be a second copy of the same signal
    spec = {"n_patients": 500, "thresholds": {"no2": 25.0}, "variables": [v.__dict__ for v in default_variables({"pm10": 1.5})]}
    wins = 0
    for seed in range(10):
        cfg_path = synth_to_cohort(tmp_path / f"s{seed}", spec, seed)
        cohort = load_cohort(load_config(cfg_path))
        plan = fit_preprocess(cohort, default_predictors(cohort, "relapse"))
        forest = train_forest(plan.transform(cohort), cohort.values("relapse"),
                              ForestParams(True, "sqrt", 8, 100), seed)
        wins += plan.output_columns[int(np.argmax(forest.importances))] == "pm10_mean"
    assert wins >= 9
