"""Nearest-station matching and weekly exposure aggregation.

Weeks are fixed 7-day blocks counted from an epoch (default 2013-01-01), not
ISO weeks: week ``w`` covers ``epoch + 7w .. epoch + 7w + 6``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .data import ColumnSpec, DataError, DataTable

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
EPOCH = date(2013, 1, 1)

# WHO 2021 daily guideline levels, ug/m3. Only a default; pass thresholds explicitly.
WHO_DAILY_THRESHOLDS = {"pm25": 15.0, "pm10": 45.0, "no2": 25.0}


def _check_coord(lat: float, lon: float) -> None:
    if not (abs(lat) <= 90.0 and abs(lon) <= 180.0):
        raise DataError(f"coordinate out of range: ({lat}, {lon})")


@dataclass
class Station:
    id: str
    lat: float
    lon: float
    series: dict[str, tuple[list[date], np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        _check_coord(self.lat, self.lon)
        for var, (dates, values) in self.series.items():
            if any(b <= a for a, b in zip(dates, dates[1:])):
                raise DataError(f"station {self.id}: dates for {var!r} not strictly increasing")
            if len(dates) != len(values):
                raise DataError(f"station {self.id}: {var!r} dates/values length mismatch")

    def reports(self, variable: str) -> bool:
        return variable in self.series


@dataclass(frozen=True)
class PostcodeLocation:
    postcode: str
    lat: float
    lon: float

    def __post_init__(self):
        _check_coord(self.lat, self.lon)


@dataclass(frozen=True)
class WeekStat:
    week_index: int
    mean: float
    coverage: int
    ratio: float | None = None


@dataclass
class WeeklyExposure:
    week_index: int
    means: dict[str, float] = field(default_factory=dict)
    coverage: dict[str, int] = field(default_factory=dict)
    ratios: dict[str, float] = field(default_factory=dict)


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    (lat1, lon1), (lat2, lon2) = a, b
    _check_coord(lat1, lon1)
    _check_coord(lat2, lon2)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def nearest_station(loc: PostcodeLocation, stations: Sequence[Station], variable: str) -> str:
    """Id of the closest station reporting ``variable``; ties go to the smallest id."""
    best = None
    for st in stations:
        if not st.reports(variable):
            continue
        key = (haversine_km((loc.lat, loc.lon), (st.lat, st.lon)), st.id)
        if best is None or key < best:
            best = key
    if best is None:
        raise DataError(f"no station reports {variable!r}")
    return best[1]


def week_index_of(d: date, epoch: date = EPOCH) -> int:
    days = (d - epoch).days
    if days < 0:
        raise DataError(f"date {d} precedes epoch {epoch}")
    return days // 7


def week_start(week_index: int, epoch: date = EPOCH) -> date:
    return epoch + timedelta(days=7 * week_index)


def week_of_year(start: date) -> int:
    """Week-of-year 1..52 of a date; the 53rd partial week folds into 52."""
    doy = start.timetuple().tm_yday
    return min((doy - 1) // 7 + 1, 52)


def _daily_blocks(dates: Sequence[date], values: Sequence[float], epoch: date):
    """Yield (week_index, 7-slot list of optional values) for each touched week."""
    blocks: dict[int, list] = {}
    for d, v in zip(dates, values):
        days = (d - epoch).days
        if days < 0:
            raise DataError(f"date {d} precedes epoch {epoch}")
        slot = blocks.setdefault(days // 7, [None] * 7)
        slot[days % 7] = None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)
    return sorted(blocks.items())


def weekly_aggregate(series: Sequence[tuple[date, float | None]], epoch: date = EPOCH,
                     threshold: float | None = None) -> list[WeekStat]:
    """Average daily values into epoch-aligned weeks, skipping weeks with no data.

    If ``threshold`` is given each stat also carries the exceedance ratio.
    """
    dates = [d for d, _ in series]
    values = [v for _, v in series]
    out = []
    for w, days in _daily_blocks(dates, values, epoch):
        observed = [v for v in days if v is not None]
        if not observed:
            continue
        ratio = threshold_ratio(days, threshold) if threshold is not None else None
        out.append(WeekStat(w, sum(observed) / len(observed), len(observed), ratio))
    return out


def threshold_ratio(daily: Sequence[float | None], threshold: float) -> float:
    """Fraction of observed days strictly above ``threshold``."""
    observed = [v for v in daily if v is not None and not math.isnan(v)]
    if not observed:
        raise DataError("threshold_ratio: no observed day in the week")
    return sum(v > threshold for v in observed) / len(observed)


def _weekly_table(dates: Sequence[date], values: np.ndarray, epoch: date,
                  threshold: float | None) -> dict[int, WeekStat]:
    return {s.week_index: s for s in weekly_aggregate(list(zip(dates, values)), epoch, threshold)}


def build_exposure_table(patients: Sequence[tuple[str, str]], stations: Sequence[Station],
                         lookup: Sequence[PostcodeLocation], variables: Sequence[str],
                         thresholds: Mapping[str, float], *, per_variable: bool = True,
                         windows: Mapping[str, tuple[int, int]] | None = None,
                         epoch: date = EPOCH) -> tuple[DataTable, list[str]]:
    """One row per (patient, week) with per-variable means, coverage and ratios.

    ``per_variable`` links each variable to its own nearest reporting station;
    otherwise a single station (nearest reporting the first variable) serves
    all variables. ``windows`` optionally restricts each patient's rows to an
    inclusive week-index range. Returns the table and per-patient diagnostics;
    patients whose postcode is missing from ``lookup`` are skipped.
    """
    locs = {p.postcode: p for p in lookup}
    by_id = {s.id: s for s in stations}
    ratio_vars = [v for v in variables if v in thresholds]
    diagnostics: list[str] = []
    cache: dict[tuple[str, str], dict[int, WeekStat]] = {}

    def stats_for(station_id: str, var: str) -> dict[int, WeekStat]:
        key = (station_id, var)
        if key not in cache:
            st = by_id[station_id]
            if var in st.series:
                d, v = st.series[var]
                cache[key] = _weekly_table(d, v, epoch, thresholds.get(var))
            else:
                cache[key] = {}
        return cache[key]

    cols: dict[str, list] = {"patient_id": [], "week_index": []}
    for var in variables:
        cols[f"{var}_mean"] = []
        cols[f"{var}_coverage"] = []
    for var in ratio_vars:
        cols[f"{var}_ratio"] = []

    for pid, postcode in sorted(patients):
        loc = locs.get(postcode)
        if loc is None:
            diagnostics.append(f"patient {pid}: postcode {postcode!r} not in lookup")
            continue
        linked: dict[str, dict[int, WeekStat]] = {}
        try:
            if per_variable:
                for var in variables:
                    linked[var] = stats_for(nearest_station(loc, stations, var), var)
            else:
                sid = nearest_station(loc, stations, variables[0])
                linked = {var: stats_for(sid, var) for var in variables}
        except DataError as exc:
            diagnostics.append(f"patient {pid}: {exc}")
            continue
        weeks = sorted(set().union(*(s.keys() for s in linked.values())))
        if windows is not None and pid in windows:
            lo, hi = windows[pid]
            weeks = [w for w in weeks if lo <= w <= hi]
        for w in weeks:
            cols["patient_id"].append(pid)
            cols["week_index"].append(w)
            for var in variables:
                stat = linked[var].get(w)
                cols[f"{var}_mean"].append(math.nan if stat is None else stat.mean)
                cols[f"{var}_coverage"].append(0 if stat is None else stat.coverage)
            for var in ratio_vars:
                stat = linked[var].get(w)
                cols[f"{var}_ratio"].append(math.nan if stat is None else stat.ratio)

    schema = exposure_schema(variables, ratio_vars)
    for msg in diagnostics:
        log.warning(msg)
    return DataTable(schema, cols), diagnostics


def exposure_schema(variables: Sequence[str], ratio_vars: Iterable[str]) -> list[ColumnSpec]:
    schema = [ColumnSpec("patient_id", "categorical", "meta"), ColumnSpec("week_index", "numeric", "meta")]
    for var in variables:
        schema.append(ColumnSpec(f"{var}_mean", "numeric", "environmental"))
        schema.append(ColumnSpec(f"{var}_coverage", "numeric", "meta"))
    for var in ratio_vars:
        schema.append(ColumnSpec(f"{var}_ratio", "numeric", "environmental"))
    return schema


def exposure_by_patient(table: DataTable, variables: Sequence[str],
                        ratio_vars: Iterable[str]) -> dict[str, dict[int, WeeklyExposure]]:
    """Regroup an exposure table into ``{patient: {week: WeeklyExposure}}``."""
    ratio_vars = list(ratio_vars)
    pids = table.values("patient_id")
    weeks = table.values("week_index")
    means = {v: table.values(f"{v}_mean") for v in variables}
    covs = {v: table.values(f"{v}_coverage") for v in variables}
    ratios = {v: table.values(f"{v}_ratio") for v in ratio_vars}
    out: dict[str, dict[int, WeeklyExposure]] = {}
    for i in range(table.n_rows):
        w = int(weeks[i])
        we = WeeklyExposure(w)
        for v in variables:
            cov = covs[v][i]
            if not math.isnan(cov) and cov > 0 and not math.isnan(means[v][i]):
                we.means[v] = float(means[v][i])
                we.coverage[v] = int(cov)
            else:
                we.coverage[v] = 0
        for v in ratio_vars:
            if not math.isnan(ratios[v][i]):
                we.ratios[v] = float(ratios[v][i])
        out.setdefault(pids[i], {})[w] = we
    return out


# -- file formats -------------------------------------------------------------

def read_stations(stream: IO[str]) -> list[Station]:
    """Long-format station CSV: station_id, lat, lon, date, variable, value."""
    reader = csv.DictReader(stream)
    need = {"station_id", "lat", "lon", "date", "variable", "value"}
    if reader.fieldnames is None:
        return []
    if not need.issubset(reader.fieldnames):
        raise DataError(f"station file lacks columns: {sorted(need - set(reader.fieldnames))}")
    coords: dict[str, tuple[float, float]] = {}
    raw: dict[str, dict[str, list]] = {}
    for r, rec in enumerate(reader):
        sid = rec["station_id"]
        try:
            coords.setdefault(sid, (float(rec["lat"]), float(rec["lon"])))
            d = date.fromisoformat(rec["date"])
            val = rec["value"]
            value = math.nan if val in ("", "NA", "NaN") else float(val)
        except ValueError as exc:
            raise DataError(f"station file row {r}: {exc}", row=r) from None
        raw.setdefault(sid, {}).setdefault(rec["variable"], []).append((d, value))
    stations = []
    for sid in sorted(raw):
        series = {}
        for var, pairs in raw[sid].items():
            pairs.sort(key=lambda t: t[0])
            series[var] = ([d for d, _ in pairs], np.array([v for _, v in pairs]))
        lat, lon = coords[sid]
        stations.append(Station(sid, lat, lon, series))
    return stations


def write_stations(stations: Sequence[Station], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["station_id", "lat", "lon", "date", "variable", "value"])
    for st in stations:
        for var in sorted(st.series):
            dates, values = st.series[var]
            for d, v in zip(dates, values):
                writer.writerow([st.id, st.lat, st.lon, d.isoformat(), var,
                                 "" if math.isnan(v) else f"{v:.4f}"])


def read_postcodes(stream: IO[str]) -> list[PostcodeLocation]:
    reader = csv.DictReader(stream)
    if reader.fieldnames is None or not {"postcode", "lat", "lon"}.issubset(reader.fieldnames):
        raise DataError("postcode file must have columns postcode, lat, lon")
    out = []
    for r, rec in enumerate(reader):
        try:
            out.append(PostcodeLocation(rec["postcode"], float(rec["lat"]), float(rec["lon"])))
        except ValueError as exc:
            raise DataError(f"postcode file row {r}: {exc}", row=r) from None
    return out


def write_postcodes(lookup: Sequence[PostcodeLocation], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["postcode", "lat", "lon"])
    for p in lookup:
        writer.writerow([p.postcode, p.lat, p.lon])
