"""Train/test protocol over (model x feature setting) cells and report emitters.

Each cell: pick features on the training set, grid-search hyperparameters by
stratified k-fold CV, refit the best cell on the whole training set and score
the held-out test set once.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cv import CVConfig, GridSpec, grid_search, prepare_folds
from .data import DataError, DataTable, stratified_split
from .metrics import evaluate
from .models import ForestParams, train_forest, train_logistic
from .models.forest import predict_proba_forest
from .models.logistic import predict_proba_logistic
from .preprocess import encoded_table, fit_preprocess
from .selection import SelectionResult, backward_select_folds, correlation_prune, vip_select

log = logging.getLogger(__name__)

MODELS = ("RF", "LR")
SETTINGS = ("all", "corr_prune", "vip", "bfs")
DEFAULT_CELLS = tuple(f"{m}/{s}" for m in MODELS for s in SETTINGS if (m, s) != ("RF", "bfs"))
SETTING_LABELS = {"all": "All features", "corr_prune": "Dropping correlated features",
                  "vip": "Features selected by RF", "bfs": "Backward feature selection"}


@dataclass
class ExperimentConfig:
    outcome: str = "relapse"
    predictors: list[str] | None = None  # None: every non-meta, non-outcome column
    test_fraction: float = 0.30
    split_seed: int = 0
    cv: CVConfig = field(default_factory=CVConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    seed: int = 0
    bootstrap_n: int = 5000
    alpha: float = 0.05
    missing_threshold: float = 0.30
    corr_threshold: float = 0.30
    corr_overrides: list[str] = field(default_factory=list)
    cells: tuple[str, ...] = DEFAULT_CELLS
    threads: int = 1
    pr_reference: float | None = None

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        for c in self.cells:
            m, _, s = c.partition("/")
            if m not in MODELS or s not in SETTINGS:
                raise ValueError(f"unknown cell {c!r}")
            if (m, s) == ("RF", "bfs"):
                raise ValueError("backward selection is run for LR only")

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "predictors": self.predictors,
                "test_fraction": self.test_fraction, "split_seed": self.split_seed,
                "cv": {"k": self.cv.k, "stratified": self.cv.stratified, "seed": self.cv.seed},
                "grid": self.grid.to_dict(), "seed": self.seed, "bootstrap_n": self.bootstrap_n,
                "alpha": self.alpha, "missing_threshold": self.missing_threshold,
                "corr_threshold": self.corr_threshold, "corr_overrides": list(self.corr_overrides),
                "cells": list(self.cells), "pr_reference": self.pr_reference}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "cv" in d:
            d["cv"] = CVConfig(**d["cv"])
        if "grid" in d:
            d["grid"] = GridSpec.from_dict(d["grid"])
        if "cells" in d:
            d["cells"] = tuple(d["cells"])
        return cls(**d)


class HeldOut:
    """Test table behind an access counter: one read per cell, at final evaluation."""

    def __init__(self, table: DataTable):
        self._table = table
        self.reads: dict[str, int] = {}

    @property
    def n_rows(self) -> int:
        return self._table.n_rows

    def read(self, cell: str) -> DataTable:
        self.reads[cell] = self.reads.get(cell, 0) + 1
        return self._table


@dataclass
class ExperimentReport:
    cells: dict[str, dict]
    selections: dict[str, dict]
    bfs_curve: list[list[float]] | None
    n_train: int
    n_test: int
    pr_baseline: float | None
    test_reads: dict[str, int]
    config: dict
    pr_reference: float | None = None

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.cells.items() if "error" in v]

    @property
    def status(self) -> str:
        if not self.failed:
            return "ok"
        return "failed" if len(self.failed) == len(self.cells) else "partial"

    def to_dict(self) -> dict:
        return {"status": self.status, "n_train": self.n_train, "n_test": self.n_test,
                "pr_baseline": self.pr_baseline, "pr_reference": self.pr_reference,
                "cells": self.cells, "selections": self.selections, "bfs_curve": self.bfs_curve,
                "test_reads": self.test_reads, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["cells"], d["selections"], d.get("bfs_curve"), d["n_train"], d["n_test"],
                   d.get("pr_baseline"), d.get("test_reads", {}), d.get("config", {}),
                   d.get("pr_reference"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def default_predictors(table: DataTable, outcome: str) -> list[str]:
    return [s.name for s in table.schema
            if s.category not in ("meta", "outcome") and s.name != outcome]


def _fit_predict(model: str, params: dict, X: np.ndarray, y: np.ndarray, X_test: np.ndarray, seed: int,
                 threads: int):
    if model == "LR":
        fitted = train_logistic(X, y, params["C"])
        return fitted, predict_proba_logistic(fitted, X_test)
    fitted = train_forest(X, y, ForestParams(**params), seed, threads)
    return fitted, predict_proba_forest(fitted, X_test)


def run_experiment(cohort: DataTable, config: ExperimentConfig,
                   held_out: HeldOut | None = None) -> ExperimentReport:
    """Run every configured cell; a failing cell is reported, the rest still run."""
    train, test = stratified_split(cohort, config.outcome, config.test_fraction, config.split_seed)
    held_out = held_out if held_out is not None else HeldOut(test)
    predictors = config.predictors or default_predictors(cohort, config.outcome)
    plan_kw = {"missing_threshold": config.missing_threshold}
    y_train = train.values(config.outcome)

    plan = fit_preprocess(train, predictors, **plan_kw)
    X_train = plan.transform(train)
    columns = plan.output_columns
    folds = prepare_folds(train, predictors, config.outcome, config.cv, **plan_kw)

    selections: dict[str, SelectionResult | Exception] = {
        "all": SelectionResult("all", list(columns))}
    grid_cache: dict[str, object] = {}

    def search(model: str, setting: str, selected: list[str]):
        key = f"{model}/{setting}"
        if key not in grid_cache:
            grid_cache[key] = grid_search(folds, model, config.grid, config.seed, selected, config.threads)
        return grid_cache[key]

    def selection(setting: str) -> SelectionResult:
        if setting not in selections:
            try:
                if setting == "corr_prune":
                    selections[setting] = correlation_prune(
                        encoded_table(plan, train), config.corr_threshold, config.corr_overrides)
                elif setting == "vip":
                    best = search("RF", "all", columns).best_params
                    forest = train_forest(X_train, y_train, ForestParams(**best), config.seed, config.threads)
                    selections[setting] = vip_select(forest.importances, columns)
                else:
                    selections[setting] = backward_select_folds(folds, config.grid.lr_C, columns,
                                                                threads=config.threads)
            except Exception as exc:  # recorded against every cell that needs it
                selections[setting] = exc
        sel = selections[setting]
        if isinstance(sel, Exception):
            raise sel
        return sel

    cells: dict[str, dict] = {}
    for cell in config.cells:
        model, _, setting = cell.partition("/")
        try:
            sel = selection(setting)
            if not sel.selected:
                raise DataError(f"selection {setting!r} kept no feature")
            idx = np.array([columns.index(c) for c in sel.selected], dtype=int)
            gs = search(model, setting, list(sel.selected))
            test_table = held_out.read(cell)
            X_test = plan.transform(test_table)[:, idx]
            y_test = test_table.values(config.outcome)
            _, scores = _fit_predict(model, gs.best_params, X_train[:, idx], y_train, X_test,
                                     config.seed, config.threads)
            ev = evaluate(scores, y_test, config.bootstrap_n, config.alpha, config.seed)
            cells[cell] = {"model": model, "setting": setting, "auc_roc": ev.auc_roc,
                           "auc_roc_ci": list(ev.auc_roc_ci), "auc_pr": ev.auc_pr,
                           "pr_baseline": ev.pr_baseline, "n_test": ev.n_test,
                           "best_params": gs.best_params, "cv_mean": gs.best_mean, "cv_std": gs.best_std,
                           "grid": [{"params": c["params"], "mean": c["mean"], "std": c["std"]}
                                    for c in gs.cells],
                           "selected_features": list(sel.selected)}
            log.info("%s: AUC-ROC %.3f [%.3f, %.3f], AUC-PR %.3f", cell, ev.auc_roc,
                     *ev.auc_roc_ci, ev.auc_pr)
        except Exception as exc:
            log.error("cell %s failed: %s", cell, exc)
            cells[cell] = {"model": model, "setting": setting,
                           "error": f"{type(exc).__name__}: {exc}"}

    sel_out = {k: v.to_dict() for k, v in selections.items() if isinstance(v, SelectionResult)}
    curve = None
    if isinstance(selections.get("bfs"), SelectionResult):
        curve = [list(c) for c in selections["bfs"].curve]
    y_test_all = test.values(config.outcome)
    return ExperimentReport(cells, sel_out, curve, train.n_rows, test.n_rows,
                            float(y_test_all.mean()), dict(held_out.reads), config.to_dict(),
                            config.pr_reference)


# -- emitters -------------------------------------------------------------------

def _fmt(v, nd=3) -> str:
    return f"{v:.{nd}f}"


def render_table(report: ExperimentReport) -> str:
    """Aligned text table: one row per feature setting, an AUC-ROC [CI] and AUC-PR column per model."""
    header = ["Features"]
    for m in MODELS:
        header += [f"{m} AUC-ROC [95% CI]", f"{m} AUC-PR"]
    rows = [header]
    for s in SETTINGS:
        row = [SETTING_LABELS[s]]
        present = False
        for m in MODELS:
            c = report.cells.get(f"{m}/{s}")
            if c is None:
                row += ["-", "-"]
            elif "error" in c:
                present = True
                row += ["failed", "failed"]
            else:
                present = True
                lo, hi = c["auc_roc_ci"]
                row += [f"{_fmt(c['auc_roc'])} [{_fmt(lo)}, {_fmt(hi)}]", _fmt(c["auc_pr"])]
        if present:
            rows.append(row)
    widths = [max(len(r[j]) for r in rows) for j in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    foot = [f"n_train = {report.n_train}, n_test = {report.n_test}"]
    if report.pr_baseline is not None:
        foot.append(f"AUC-PR baseline (test prevalence) = {_fmt(report.pr_baseline)}")
    if report.pr_reference is not None:
        foot.append(f"AUC-PR external reference (not computed here) = {_fmt(report.pr_reference)}")
    for k in report.failed:
        foot.append(f"{k}: {report.cells[k]['error']}")
    return "\n".join(lines + [""] + foot) + "\n"


def curve_csv(report: ExperimentReport) -> str:
    out = ["n_features,mean_auc,std_auc"]
    for size, mean, std in sorted(report.bfs_curve or [], key=lambda r: -r[0]):
        out.append(f"{int(size)},{mean:.6f},{std:.6f}")
    return "\n".join(out) + "\n"


def curve_svg(report: ExperimentReport, width: int = 640, height: int = 400) -> str:
    """Mean CV AUC-ROC against subset size with a shaded one-std band."""
    pts = sorted(report.bfs_curve or [], key=lambda r: r[0])
    ml, mr, mt, mb = 60, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    if pts:
        sizes = [p[0] for p in pts]
        lo = min(p[1] - p[2] for p in pts)
        hi = max(p[1] + p[2] for p in pts)
        if hi - lo < 1e-9:
            lo, hi = lo - 0.01, hi + 0.01
        x0, x1 = min(sizes), max(sizes)
        span = (x1 - x0) or 1

        def sx(v):
            return ml + (v - x0) / span * pw

        def sy(v):
            return mt + (hi - v) / (hi - lo) * ph

        upper = [f"{sx(s):.2f},{sy(m + d):.2f}" for s, m, d in pts]
        lower = [f"{sx(s):.2f},{sy(m - d):.2f}" for s, m, d in reversed(pts)]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(s):.2f},{sy(m):.2f}" for s, m, _ in pts)
        parts.append(f'<polyline points="{line}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
        parts.append(f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>')
        parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>')
        for s in sizes:
            parts.append(f'<text x="{sx(s):.2f}" y="{mt + ph + 15}" font-size="10" text-anchor="middle">{int(s)}</text>')
        for v in np.linspace(lo, hi, 5):
            parts.append(f'<text x="{ml - 5}" y="{sy(v) + 3:.2f}" font-size="10" text-anchor="end">{v:.3f}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 10}" font-size="12" text-anchor="middle">Number of features</text>')
    parts.append(f'<text x="15" y="{mt + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 15 {mt + ph / 2})">CV AUC-ROC (mean, std band)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def selection_csv(report: ExperimentReport) -> str:
    """Feature-by-method table: x marks, plus the importance of the VIP-selected features."""
    sels = report.selections
    names = list(sels.get("all", {}).get("selected", []))
    vip = sels.get("vip", {})
    scores = vip.get("scores") or {}
    marked = {k: set(v.get("selected", [])) for k, v in sels.items()}
    ordered = list(vip.get("selected", [])) + [n for n in names if n not in set(vip.get("selected", []))]
    out = ["feature,corr_prune,vip,importance,bfs"]
    for n in ordered:
        imp = f"{scores[n]:.6f}" if n in marked.get("vip", ()) and n in scores else ""
        out.append(",".join([n, "x" if n in marked.get("corr_prune", ()) else "",
                             "x" if n in marked.get("vip", ()) else "", imp,
                             "x" if n in marked.get("bfs", ()) else ""]))
    return "\n".join(out) + "\n"


def emit_all(report: ExperimentReport) -> dict[str, str]:
    """Every report artifact by file name."""
    out = {"report.json": report.to_json(), "table.txt": render_table(report),
           "selection.csv": selection_csv(report)}
    if report.bfs_curve is not None:
        out["bfs_curve.csv"] = curve_csv(report)
        out["bfs_curve.svg"] = curve_svg(report)
    return out


def with_cells(config: ExperimentConfig, cells: Sequence[str]) -> ExperimentConfig:
    return replace(config, cells=tuple(cells))
