"""Matched case-control cohort construction.

A case is a patient's first relapse whose preceding week has exposure data;
its predictor week is the week before the relapse week. Controls are patients
with no relapse in their follow-up, matched one-to-one to cases on
week-of-year and DMT era (before/after 2018-01-01) by maximum bipartite
matching.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import IO, Iterable, Mapping, Sequence

from .data import ColumnSpec, DataError, DataTable
from .linkage import EPOCH, WeeklyExposure, week_index_of, week_of_year, week_start

ERA_BOUNDARY = date(2018, 1, 1)
PRE2018, POST2018 = "pre2018", "post2018"

SEASONS = {12: "Winter", 1: "Winter", 2: "Winter", 3: "Spring", 4: "Spring", 5: "Spring",
           6: "Summer", 7: "Summer", 8: "Summer", 9: "Autumn", 10: "Autumn", 11: "Autumn"}


@dataclass
class Visit:
    date: date
    edss: float | None
    subscores: dict[str, float | None] = field(default_factory=dict)


@dataclass
class PatientTimeline:
    id: str
    onset_date: date
    diagnosis_date: date
    relapse_dates: list[date] = field(default_factory=list)
    static: dict[str, object] = field(default_factory=dict)
    visits: list[Visit] = field(default_factory=list)
    exposure: dict[int, WeeklyExposure] = field(default_factory=dict)
    follow_up: tuple[date, date] | None = None

    def __post_init__(self):
        self.relapse_dates = sorted(self.relapse_dates)
        self.visits = sorted(self.visits, key=lambda v: v.date)
        if self.diagnosis_date < self.onset_date:
            raise DataError(f"patient {self.id}: diagnosis precedes onset")

    def observed_relapses(self) -> list[date]:
        if self.follow_up is None:
            return list(self.relapse_dates)
        lo, hi = self.follow_up
        return [d for d in self.relapse_dates if lo <= d <= hi]

    def observation_weeks(self) -> range:
        if self.follow_up is not None:
            lo, hi = self.follow_up
            first = max(0, -(-(lo - EPOCH).days // 7))  # first week starting on/after lo
            last = week_index_of(hi) if hi >= EPOCH else -1
            if week_start(last) > hi:
                last -= 1
            return range(first, last + 1)
        if not self.exposure:
            return range(0)
        return range(min(self.exposure), max(self.exposure) + 1)


@dataclass
class CohortInstance:
    subject_id: str
    label: int
    event_week: int
    predictor_week: int
    week_of_year: int
    era: str
    features: dict[str, object] = field(default_factory=dict)


@dataclass
class MatchReport:
    pairs: list[tuple[str, str, int, str]]
    unmatched: list[str]
    n_cases: int
    n_pool: int

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "n_controls": len(self.pairs),
            "n_unmatched": len(self.unmatched),
            "n_control_pool": self.n_pool,
            "pairs": [{"case": c, "control": k, "week_of_year": w, "era": e}
                      for c, k, w, e in self.pairs],
            "unmatched": list(self.unmatched),
        }


def era_of_date(d: date) -> str:
    return POST2018 if d >= ERA_BOUNDARY else PRE2018


def era_of(week_index: int) -> str:
    return era_of_date(week_start(week_index))


def season_of(d: date) -> str:
    return SEASONS[d.month]


def _covered(t: PatientTimeline, week: int, variables: Sequence[str]) -> bool:
    exp = t.exposure.get(week)
    if exp is None:
        return False
    return all(exp.coverage.get(v, 0) > 0 for v in variables)


def _variables_of(t: PatientTimeline) -> list[str]:
    names = set()
    for exp in t.exposure.values():
        names.update(exp.coverage)
    return sorted(names)


def first_eligible_relapse(t: PatientTimeline,
                           variables: Sequence[str] | None = None) -> tuple[int, int] | None:
    """(event_week, predictor_week) of the first relapse with a covered previous week."""
    variables = _variables_of(t) if variables is None else variables
    for d in t.observed_relapses():
        if d < EPOCH:
            continue
        w = week_index_of(d)
        if w >= 1 and _covered(t, w - 1, variables):
            return w, w - 1
    return None


def eligible_control_weeks(t: PatientTimeline, variables: Sequence[str] | None = None) -> set[int]:
    """Weeks ``w`` in the observation range whose previous week is covered."""
    if t.observed_relapses():
        raise DataError(f"patient {t.id} has relapses in the observation interval")
    variables = _variables_of(t) if variables is None else variables
    return {w for w in t.observation_weeks() if w >= 1 and _covered(t, w - 1, variables)}


def case_instance(t: PatientTimeline, variables: Sequence[str] | None = None) -> CohortInstance | None:
    hit = first_eligible_relapse(t, variables)
    if hit is None:
        return None
    event, pred = hit
    start = week_start(event)
    return CohortInstance(t.id, 1, event, pred, week_of_year(start), era_of(event))


def _maximum_matching(adjacency: list[list[str]]) -> dict[int, str]:
    """Maximum bipartite matching by BFS augmenting paths, in the given order."""
    owner: dict[str, int] = {}
    assigned: dict[int, str] = {}
    for root in range(len(adjacency)):
        parent: dict[str, int] = {}
        queue = deque([root])
        seen_cases = {root}
        free = None
        while queue and free is None:
            c = queue.popleft()
            for pid in adjacency[c]:
                if pid in parent:
                    continue
                parent[pid] = c
                if pid not in owner:
                    free = pid
                    break
                nxt = owner[pid]
                if nxt not in seen_cases:
                    seen_cases.add(nxt)
                    queue.append(nxt)
        if free is None:
            continue
        pid = free
        while True:
            c = parent[pid]
            prev = assigned.get(c)
            owner[pid] = c
            assigned[c] = pid
            if c == root:
                break
            pid = prev
    return assigned


def match_controls(cases: Sequence[CohortInstance],
                   pool: Sequence[tuple[str, Iterable[int]]]
                   ) -> tuple[list[tuple[CohortInstance, CohortInstance]], list[str]]:
    """Pair cases with control patients on (week-of-year, era).

    ``pool`` holds (patient id, eligible control weeks). Each patient serves at
    most one case. The matching has maximum cardinality; cases and patients
    are visited in id order so the result does not depend on input order. A
    matched control takes the earliest of its admissible weeks.
    """
    cases = sorted(cases, key=lambda c: c.subject_id)
    slots: dict[str, dict[tuple[int, str], int]] = {}
    for pid, weeks in sorted(pool, key=lambda p: p[0]):
        table = slots.setdefault(pid, {})
        for w in sorted(weeks):
            table.setdefault((week_of_year(week_start(w)), era_of(w)), w)
    patients = sorted(slots)
    adjacency = [[pid for pid in patients if (c.week_of_year, c.era) in slots[pid]] for c in cases]
    assigned = _maximum_matching(adjacency)
    pairs, unmatched = [], []
    for i, case in enumerate(cases):
        pid = assigned.get(i)
        if pid is None:
            unmatched.append(case.subject_id)
            continue
        w = slots[pid][(case.week_of_year, case.era)]
        pairs.append((case, CohortInstance(pid, 0, w, w - 1, case.week_of_year, case.era)))
    return pairs, unmatched


def assemble_features(instance: CohortInstance, t: PatientTimeline,
                      static_fields: Sequence[str], variables: Sequence[str],
                      ratio_vars: Sequence[str], subscores: Sequence[str] = ()) -> dict[str, object]:
    """Feature row for one instance; reads nothing dated at or after the event week."""
    pred_start = week_start(instance.predictor_week)
    cutoff = pred_start + timedelta(days=7)
    row: dict[str, object] = {name: t.static.get(name) for name in static_fields}

    if "birth_date" in t.static and t.static["birth_date"] is not None:
        row["age_at_onset"] = (t.onset_date - t.static["birth_date"]).days / 365.25
    else:
        row["age_at_onset"] = t.static.get("age_at_onset")
    row["diagnostic_delay"] = float((t.diagnosis_date - t.onset_date).days)
    row["time_since_onset"] = float((pred_start - t.onset_date).days)

    prior = [v for v in t.visits if v.date < cutoff]
    last = prior[-1] if prior else None
    row["edss"] = None if last is None else last.edss
    for s in subscores:
        row[s] = None if last is None else last.subscores.get(s)

    exp = t.exposure.get(instance.predictor_week)
    for v in variables:
        row[f"{v}_mean"] = None if exp is None else exp.means.get(v)
    for v in ratio_vars:
        row[f"{v}_ratio"] = None if exp is None else exp.ratios.get(v)
    row["season"] = season_of(pred_start)
    return row


def feature_schema(static_specs: Sequence[ColumnSpec], variables: Sequence[str],
                   ratio_vars: Sequence[str], subscores: Sequence[str] = ()) -> list[ColumnSpec]:
    specs = list(static_specs)
    specs += [
        ColumnSpec("age_at_onset", "numeric", "demographic"),
        ColumnSpec("diagnostic_delay", "numeric", "clinical_onset"),
        ColumnSpec("time_since_onset", "numeric", "clinical_current_week"),
        ColumnSpec("edss", "numeric", "clinical_recent"),
    ]
    specs += [ColumnSpec(s, "numeric", "clinical_recent") for s in subscores]
    specs += [ColumnSpec(f"{v}_mean", "numeric", "environmental") for v in variables]
    specs += [ColumnSpec(f"{v}_ratio", "numeric", "environmental") for v in ratio_vars]
    specs.append(ColumnSpec("season", "categorical", "environmental"))
    return specs


META_SCHEMA = [
    ColumnSpec("subject_id", "categorical", "meta"),
    ColumnSpec("pair_id", "numeric", "meta"),
    ColumnSpec("relapse", "binary", "outcome"),
    ColumnSpec("event_week", "numeric", "meta"),
    ColumnSpec("predictor_week", "numeric", "meta"),
    ColumnSpec("week_of_year", "numeric", "meta"),
    ColumnSpec("era", "categorical", "meta"),
]


def build_cohort(timelines: Sequence[PatientTimeline], variables: Sequence[str],
                 ratio_vars: Sequence[str], static_specs: Sequence[ColumnSpec],
                 subscores: Sequence[str] = ()) -> tuple[DataTable, MatchReport]:
    """Cases, matched controls and unmatched cases as one labelled table."""
    by_id = {t.id: t for t in timelines}
    cases, pool = [], []
    for t in sorted(timelines, key=lambda t: t.id):
        if t.observed_relapses():
            inst = case_instance(t, variables)
            if inst is not None:
                cases.append(inst)
        else:
            weeks = eligible_control_weeks(t, variables)
            if weeks:
                pool.append((t.id, weeks))
    pairs, unmatched = match_controls(cases, pool)

    rows: list[tuple[int | None, CohortInstance]] = []
    for k, (case, ctrl) in enumerate(pairs):
        rows.append((k, case))
        rows.append((k, ctrl))
    unmatched_set = set(unmatched)
    rows += [(None, c) for c in sorted(cases, key=lambda c: c.subject_id) if c.subject_id in unmatched_set]

    static_names = [s.name for s in static_specs]
    schema = META_SCHEMA + feature_schema(static_specs, variables, ratio_vars, subscores)
    cols: dict[str, list] = {s.name: [] for s in schema}
    for pair_id, inst in rows:
        inst.features = assemble_features(inst, by_id[inst.subject_id], static_names,
                                          variables, ratio_vars, subscores)
        cols["subject_id"].append(inst.subject_id)
        cols["pair_id"].append(math.nan if pair_id is None else pair_id)
        cols["relapse"].append(float(inst.label))
        cols["event_week"].append(inst.event_week)
        cols["predictor_week"].append(inst.predictor_week)
        cols["week_of_year"].append(inst.week_of_year)
        cols["era"].append(inst.era)
        for spec in schema[len(META_SCHEMA):]:
            v = inst.features.get(spec.name)
            if spec.kind == "categorical":
                cols[spec.name].append(v)
            else:
                cols[spec.name].append(math.nan if v is None else float(v))
    report = MatchReport([(c.subject_id, k.subject_id, c.week_of_year, c.era) for c, k in pairs],
                         list(unmatched), len(cases), len(pool))
    return DataTable(schema, cols), report


# -- file formats -------------------------------------------------------------

REQUIRED_STATIC = ("patient_id", "postcode", "onset_date", "diagnosis_date")


def _opt_date(s: str | None) -> date | None:
    return None if s in (None, "", "NA") else date.fromisoformat(s)


def _typed(kind: str, raw: str | None, where: str):
    if raw in (None, "", "NA", "NaN"):
        return None
    if kind == "categorical":
        return raw
    try:
        v = float(raw)
    except ValueError:
        raise DataError(f"{where}: cannot parse {raw!r}") from None
    if kind == "binary" and v not in (0.0, 1.0):
        raise DataError(f"{where}: {raw!r} is not binary")
    return v


def read_static(stream: IO[str], static_specs: Sequence[ColumnSpec]) -> list[dict]:
    """Static patient table: required id/postcode/dates plus configured feature columns."""
    reader = csv.DictReader(stream)
    fields = reader.fieldnames or []
    need = set(REQUIRED_STATIC) | {s.name for s in static_specs}
    if not need.issubset(fields):
        raise DataError(f"patient file lacks columns: {sorted(need - set(fields))}")
    out = []
    for r, rec in enumerate(reader):
        try:
            entry = {
                "patient_id": rec["patient_id"],
                "postcode": rec["postcode"],
                "onset_date": date.fromisoformat(rec["onset_date"]),
                "diagnosis_date": date.fromisoformat(rec["diagnosis_date"]),
                "follow_up_start": _opt_date(rec.get("follow_up_start")),
                "follow_up_end": _opt_date(rec.get("follow_up_end")),
                "birth_date": _opt_date(rec.get("birth_date")),
            }
        except ValueError as exc:
            raise DataError(f"patient file row {r}: {exc}", row=r) from None
        entry["static"] = {s.name: _typed(s.kind, rec[s.name], f"patient file row {r}, {s.name}")
                           for s in static_specs}
        if "age_at_onset" in fields and "age_at_onset" not in entry["static"]:
            entry["static"]["age_at_onset"] = _typed("numeric", rec["age_at_onset"], f"row {r}")
        out.append(entry)
    return out


def read_relapses(stream: IO[str]) -> dict[str, list[date]]:
    out: dict[str, list[date]] = {}
    for r, rec in enumerate(csv.DictReader(stream)):
        try:
            out.setdefault(rec["patient_id"], []).append(date.fromisoformat(rec["date"]))
        except (KeyError, ValueError) as exc:
            raise DataError(f"relapse file row {r}: {exc}", row=r) from None
    return out


def read_visits(stream: IO[str]) -> tuple[dict[str, list[Visit]], list[str]]:
    """Visit table: patient_id, date, edss, then any number of subscore columns."""
    reader = csv.DictReader(stream)
    fields = reader.fieldnames or []
    if not {"patient_id", "date", "edss"}.issubset(fields):
        raise DataError("visit file must have columns patient_id, date, edss")
    subscores = [f for f in fields if f not in ("patient_id", "date", "edss")]
    out: dict[str, list[Visit]] = {}
    for r, rec in enumerate(reader):
        where = f"visit file row {r}"
        try:
            d = date.fromisoformat(rec["date"])
        except ValueError as exc:
            raise DataError(f"{where}: {exc}", row=r) from None
        out.setdefault(rec["patient_id"], []).append(
            Visit(d, _typed("numeric", rec["edss"], where),
                  {s: _typed("numeric", rec[s], where) for s in subscores}))
    return out, subscores


def assemble_timelines(static_rows: Sequence[dict], relapses: Mapping[str, list[date]],
                       visits: Mapping[str, list[Visit]],
                       exposure: Mapping[str, dict[int, WeeklyExposure]]) -> list[PatientTimeline]:
    out = []
    for rec in static_rows:
        pid = rec["patient_id"]
        static = dict(rec["static"])
        if rec.get("birth_date") is not None:
            static["birth_date"] = rec["birth_date"]
        fu = None
        if rec.get("follow_up_start") and rec.get("follow_up_end"):
            fu = (rec["follow_up_start"], rec["follow_up_end"])
        out.append(PatientTimeline(pid, rec["onset_date"], rec["diagnosis_date"],
                                   relapses.get(pid, []), static, visits.get(pid, []),
                                   dict(exposure.get(pid, {})), fu))
    return out


def follow_up_windows(static_rows: Sequence[dict]) -> dict[str, tuple[int, int]]:
    """Week-index ranges covering each patient's follow-up plus the week before it."""
    out = {}
    for rec in static_rows:
        lo, hi = rec.get("follow_up_start"), rec.get("follow_up_end")
        if lo is None or hi is None:
            continue
        out[rec["patient_id"]] = (max(0, week_index_of(max(lo, EPOCH)) - 1),
                                  week_index_of(max(hi, EPOCH)))
    return out
