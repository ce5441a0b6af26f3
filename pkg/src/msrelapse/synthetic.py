"""Synthetic stations, patients, relapses and visits with a planted relapse hazard.

Each station variable ``v`` is a daily series::

    x_d = mu_v + A_v sin(2 pi doy / 365.25) + s_v (a e_week + b eps_d)

with ``b = 0.6`` and ``a = sqrt(1 - b^2 / 7)``, so a fully observed weekly
mean has standard deviation ``s_v`` around the seasonal curve. A patient
relapses in week ``w`` with probability

    h = expit(logit(base_hazard) + sum_v beta_v z_v),   z_v = (m_v - mu_v) / s_v

where ``m_v`` is the week ``w - 1`` mean at the patient's nearest station for
``v``, exactly as the linkage step will compute it from the written files.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .cohort import Visit
from .linkage import EPOCH, PostcodeLocation, Station, nearest_station, week_start

DAY_SHARE = 0.6
WEEK_SHARE = math.sqrt(1.0 - DAY_SHARE ** 2 / 7.0)
LAT_RANGE = (44.5, 45.8)
LON_RANGE = (7.0, 9.5)
RESIDENCE = (("towns", 0.5), ("cities", 0.3), ("rural", 0.2))


class SpecError(ValueError):
    pass


@dataclass
class VariableSpec:
    name: str
    mean: float
    sd: float
    seasonal_amplitude: float = 0.0
    coef: float = 0.0
    lower: float | None = None
    upper: float | None = None


def default_variables(coefs: dict[str, float] | None = None) -> list[VariableSpec]:
    coefs = coefs or {}
    return [
        VariableSpec("pm10", 35.0, 10.0, 0.0, coefs.get("pm10", 0.0), lower=0.0),
        VariableSpec("no2", 30.0, 8.0, 0.0, coefs.get("no2", 0.0), lower=0.0),
        VariableSpec("temperature", 13.0, 3.0, 9.0, coefs.get("temperature", 0.0)),
        VariableSpec("humidity", 70.0, 8.0, 5.0, coefs.get("humidity", 0.0), lower=0.0, upper=100.0),
    ]


SIGNAL_COEFS = {"pm10": 0.75, "no2": 0.59}


@dataclass
class SyntheticSpec:
    n_patients: int = 1250
    base_hazard: float = 0.005
    variables: list[VariableSpec] = field(default_factory=lambda: default_variables(SIGNAL_COEFS))
    missing_rate: float = 0.05
    n_stations: int = 8
    station_gap_rate: float = 0.15
    n_postcodes: int = 60
    follow_up_weeks: int = 52
    first_week: int = 1
    last_start_week: int = 460
    visit_interval_weeks: int = 26
    thresholds: dict[str, float] = field(default_factory=lambda: {"pm10": 45.0, "no2": 25.0})
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise SpecError("n_patients: need at least one patient")
        if not 0.0 < self.base_hazard < 1.0:
            raise SpecError(f"base_hazard: must lie in (0, 1), got {self.base_hazard}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise SpecError(f"missing_rate: must lie in [0, 1), got {self.missing_rate}")
        if not 0.0 <= self.station_gap_rate < 1.0:
            raise SpecError("station_gap_rate: must lie in [0, 1)")
        if self.n_stations < 1 or self.n_postcodes < 1:
            raise SpecError("n_stations and n_postcodes must be positive")
        if self.follow_up_weeks < 2 or self.visit_interval_weeks < 1:
            raise SpecError("follow_up_weeks must be >= 2 and visit_interval_weeks >= 1")
        if not 1 <= self.first_week <= self.last_start_week:
            raise SpecError("need 1 <= first_week <= last_start_week")
        names = [v.name for v in self.variables]
        if not names or len(set(names)) != len(names):
            raise SpecError("variables: names must be unique and non-empty")
        for v in self.variables:
            if not (math.isfinite(v.coef) and math.isfinite(v.mean) and math.isfinite(v.seasonal_amplitude)):
                raise SpecError(f"variables.{v.name}: non-finite parameter")
            if not (math.isfinite(v.sd) and v.sd > 0):
                raise SpecError(f"variables.{v.name}: sd must be positive")
        for k in self.thresholds:
            if k not in names:
                raise SpecError(f"thresholds: unknown variable {k!r}")

    @property
    def coefs(self) -> np.ndarray:
        return np.array([v.coef for v in self.variables])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise SpecError(f"unknown spec field {unknown[0]!r}")
        if "variables" in d:
            try:
                d["variables"] = [VariableSpec(**v) for v in d["variables"]]
            except TypeError as exc:
                raise SpecError(f"variables: {exc}") from None
        spec = cls(**d)
        spec.validate()
        return spec


def null_spec(**kw) -> SyntheticSpec:
    """Same design with every coefficient zero."""
    return SyntheticSpec(variables=default_variables(), **kw)


@dataclass
class SyntheticDataset:
    stations: list[Station]
    postcodes: list[PostcodeLocation]
    patients: list[dict]
    relapses: dict[str, list[date]]
    visits: dict[str, list[Visit]]
    subscores: list[str]
    spec: SyntheticSpec


def _day_of_year(d0: date, n: int) -> np.ndarray:
    start = d0.timetuple().tm_yday
    doy = np.empty(n)
    d, k = d0, 0
    while k < n:  # year by year, so leap years are exact
        year_left = (date(d.year, 12, 31) - d).days + 1
        m = min(year_left, n - k)
        doy[k:k + m] = np.arange(start, start + m)
        k += m
        d = d + timedelta(days=m)
        start = 1
    return doy


def _daily_series(v: VariableSpec, n_weeks: int, doy: np.ndarray, missing_rate: float,
                  rng: np.random.Generator) -> np.ndarray:
    e_week = np.repeat(rng.standard_normal(n_weeks), 7)
    eps = rng.standard_normal(7 * n_weeks)
    x = (v.mean + v.seasonal_amplitude * np.sin(2 * np.pi * doy / 365.25)
         + v.sd * (WEEK_SHARE * e_week + DAY_SHARE * eps))
    if v.lower is not None or v.upper is not None:
        x = np.clip(x, v.lower, v.upper)
    x = np.round(x, 4)  # the precision written to disk
    x[rng.random(x.size) < missing_rate] = np.nan
    return x


def _weekly_means(daily: np.ndarray) -> np.ndarray:
    blocks = daily.reshape(-1, 7)
    seen = ~np.isnan(blocks)
    cnt = seen.sum(axis=1)
    total = np.where(seen, blocks, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, total / np.maximum(cnt, 1), np.nan)


def generate_cohort(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic synthetic dataset for ``spec``; see the module docstring for the model."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    s_station, s_patient, s_event, s_visit = (np.random.default_rng(s) for s in root.spawn(4))
    n_weeks = spec.last_start_week + spec.follow_up_weeks + 1
    n_days = 7 * n_weeks
    dates = [EPOCH + timedelta(days=i) for i in range(n_days)]
    doy = _day_of_year(EPOCH, n_days)

    stations, weekly = [], {}
    for k in range(spec.n_stations):
        sid = f"S{k:03d}"
        lat = round(float(s_station.uniform(*LAT_RANGE)), 5)
        lon = round(float(s_station.uniform(*LON_RANGE)), 5)
        series = {}
        for v in spec.variables:
            gap = s_station.random() < spec.station_gap_rate
            daily = _daily_series(v, n_weeks, doy, spec.missing_rate, s_station)
            if gap and k > 0:  # the first station reports everything
                continue
            series[v.name] = (dates, daily)
            weekly[(sid, v.name)] = _weekly_means(daily)
        stations.append(Station(sid, lat, lon, series))

    postcodes = [PostcodeLocation(f"P{k:04d}", round(float(s_station.uniform(*LAT_RANGE)), 5),
                                  round(float(s_station.uniform(*LON_RANGE)), 5))
                 for k in range(spec.n_postcodes)]
    nearest = {(p.postcode, v.name): nearest_station(p, stations, v.name)
               for p in postcodes for v in spec.variables}

    b0 = float(logit(spec.base_hazard))
    beta = spec.coefs
    patients, relapses, visits = [], {}, {}
    for i in range(spec.n_patients):
        pid = f"M{i:05d}"
        pc = postcodes[int(s_patient.integers(spec.n_postcodes))].postcode
        w0 = int(s_patient.integers(spec.first_week, spec.last_start_week + 1))
        fu_start = week_start(w0)
        fu_end = fu_start + timedelta(days=7 * spec.follow_up_weeks - 1)
        onset = fu_start - timedelta(days=int(s_patient.integers(183, 20 * 365)))
        diagnosis = onset + timedelta(days=int(s_patient.exponential(365.0)))
        if diagnosis > fu_start:
            diagnosis = fu_start
        age = float(np.clip(s_patient.normal(30.0, 9.0), 10.0, 60.0))
        sex = float(s_patient.random() < 0.7)
        res = RESIDENCE[int(np.searchsorted(np.cumsum([p for _, p in RESIDENCE]), s_patient.random()))][0]
        brainstem = float(s_patient.random() < 0.2)
        static = {"age_at_onset": round(age, 2), "sex": sex, "residence": res, "brainstem_onset": brainstem}
        for key in static:
            if s_patient.random() < spec.missing_rate:
                static[key] = None
        patients.append({"patient_id": pid, "postcode": pc, "onset_date": onset,
                         "diagnosis_date": diagnosis, "follow_up_start": fu_start,
                         "follow_up_end": fu_end, **static})

        # hazard of week w uses week w - 1 at the nearest station per variable
        weeks = np.arange(w0, w0 + spec.follow_up_weeks)
        z = np.zeros((weeks.size, len(spec.variables)))
        for j, v in enumerate(spec.variables):
            m = weekly[(nearest[(pc, v.name)], v.name)][weeks - 1]
            z[:, j] = np.where(np.isnan(m), 0.0, (m - v.mean) / v.sd)
        h = expit(b0 + z @ beta)
        hit = s_event.random(weeks.size) < h
        days = s_event.integers(0, 7, weeks.size)
        relapses[pid] = [week_start(int(w)) + timedelta(days=int(d))
                         for w, d, f in zip(weeks, days, hit) if f]

        vis, edss = [], float(s_visit.integers(0, 8)) / 2.0
        d = fu_start - timedelta(days=int(s_visit.integers(1, 7 * spec.visit_interval_weeks)))
        while d <= fu_end:
            edss = float(np.clip(edss + 0.5 * s_visit.integers(-1, 2), 0.0, 9.5))
            sub = {"pyramidal_fs": float(s_visit.integers(0, 5)), "sensory_fs": float(s_visit.integers(0, 5))}
            e = None if s_visit.random() < spec.missing_rate else edss
            sub = {k: (None if s_visit.random() < spec.missing_rate else x) for k, x in sub.items()}
            vis.append(Visit(d, e, sub))
            d = d + timedelta(days=7 * spec.visit_interval_weeks)
        visits[pid] = vis

    return SyntheticDataset(stations, postcodes, patients, relapses, visits,
                            ["pyramidal_fs", "sensory_fs"], spec)


def bayes_optimal_auc(spec: SyntheticSpec, n_mc: int = 200_000, seed: int = 12345) -> float:
    """AUC of the true log-odds separating case weeks from control weeks.

    Feature vectors are drawn from the generating process (random week phase,
    weekly and daily noise, day-level MCAR); a draw counts as a case with
    weight ``h`` and as a control with weight ``1 - h``. Seasonality is drawn
    as in the generator, and the score ignores it just like the hazard does.
    """
    rng = np.random.default_rng(seed)
    z = np.zeros((n_mc, len(spec.variables)))
    doy0 = rng.uniform(1, 366, n_mc)
    for j, v in enumerate(spec.variables):
        if v.coef == 0.0:
            continue
        doy = doy0[:, None] + np.arange(7)
        x = (v.mean + v.seasonal_amplitude * np.sin(2 * np.pi * doy / 365.25)
             + v.sd * (WEEK_SHARE * rng.standard_normal((n_mc, 1)) + DAY_SHARE * rng.standard_normal((n_mc, 7))))
        if v.lower is not None or v.upper is not None:
            x = np.clip(x, v.lower, v.upper)
        x[rng.random(x.shape) < spec.missing_rate] = np.nan
        m = _weekly_means(x.reshape(-1))
        z[:, j] = np.where(np.isnan(m), 0.0, (m - v.mean) / v.sd)
    score = z @ spec.coefs
    h = expit(logit(spec.base_hazard) + score)
    return weighted_auc(score, h, 1.0 - h)


def weighted_auc(score: np.ndarray, w_pos: np.ndarray, w_neg: np.ndarray) -> float:
    """Pairwise AUC where every point is a positive with weight ``w_pos`` and a negative with ``w_neg``."""
    order = np.argsort(score, kind="stable")
    s, wp, wn = score[order], w_pos[order], w_neg[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    starts = np.r_[0, ends[:-1] + 1]
    cp = np.r_[0.0, np.cumsum(wp)]
    cn = np.r_[0.0, np.cumsum(wn)]
    pos_blk = cp[ends + 1] - cp[starts]
    neg_blk = cn[ends + 1] - cn[starts]
    neg_below = cn[starts]
    num = np.sum(pos_blk * (neg_below + 0.5 * neg_blk))
    return float(num / (wp.sum() * wn.sum()))


# -- files --------------------------------------------------------------------

STATIC_COLUMNS = [
    {"name": "sex", "kind": "binary", "category": "demographic"},
    {"name": "residence", "kind": "categorical", "category": "demographic"},
    {"name": "brainstem_onset", "kind": "binary", "category": "clinical_onset"},
]


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, date):
        return v.isoformat()
    return str(v)


def write_dataset(ds: SyntheticDataset, out_dir: Path) -> dict[str, Path]:
    from .linkage import write_postcodes, write_stations

    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {k: out_dir / f"{k}.csv" for k in ("stations", "postcodes", "patients", "relapses", "visits")}
    with open(paths["stations"], "w", newline="") as f:
        write_stations(ds.stations, f)
    with open(paths["postcodes"], "w", newline="") as f:
        write_postcodes(ds.postcodes, f)
    cols = ["patient_id", "postcode", "onset_date", "diagnosis_date", "follow_up_start",
            "follow_up_end", "age_at_onset", "sex", "residence", "brainstem_onset"]
    with open(paths["patients"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for p in ds.patients:
            w.writerow([_cell(p[c]) for c in cols])
    with open(paths["relapses"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "date"])
        for pid in sorted(ds.relapses):
            for d in ds.relapses[pid]:
                w.writerow([pid, d.isoformat()])
    with open(paths["visits"], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "date", "edss"] + ds.subscores)
        for pid in sorted(ds.visits):
            for v in ds.visits[pid]:
                w.writerow([pid, v.date.isoformat(), _cell(v.edss)] + [_cell(v.subscores.get(s)) for s in ds.subscores])
    return paths


def dataset_config(ds: SyntheticDataset, paths: dict[str, Path], base: Path) -> dict:
    """Run configuration pointing at the written files (paths relative to ``base``)."""
    spec = ds.spec
    rel = {k: str(Path(p).relative_to(base)) if Path(p).is_relative_to(base) else str(p) for k, p in paths.items()}
    return {
        "paths": {**rel, "output_dir": "out"},
        "variables": [v.name for v in spec.variables],
        "thresholds": dict(spec.thresholds),
        "static_columns": STATIC_COLUMNS,
        "seed": spec.seed,
    }


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def signal_spec(scale: float = 1.0, **kw) -> SyntheticSpec:
    """The default planted-signal design with coefficients multiplied by ``scale``."""
    return SyntheticSpec(variables=default_variables({k: scale * v for k, v in SIGNAL_COEFS.items()}), **kw)


def expected_case_rate(spec: SyntheticSpec, n_mc: int = 200_000, seed: int = 7) -> float:
    """Mean weekly hazard under the generating process (Monte Carlo)."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_mc, len(spec.variables)))
    return float(expit(logit(spec.base_hazard) + z @ spec.coefs).mean())

