"""Command-line entry point: synth, link, cohort, run, report.

Configuration is one JSON file. String values under ``paths`` may use
``${VAR}`` environment interpolation; relative paths resolve against the
config file's directory. ``--seed``, ``--threads`` and ``--out`` override the
environment (``MSRELAPSE_SEED``, ``MSRELAPSE_THREADS``, ``MSRELAPSE_OUT``),
which overrides the file.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 partial results.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from string import Template

from .cohort import (assemble_timelines, build_cohort, follow_up_windows, read_relapses, read_static,
                     read_visits)
from .data import ColumnSpec, DataError, DataTable, read_csv_table
from .experiment import ExperimentConfig, ExperimentReport, emit_all, run_experiment
from .linkage import (WHO_DAILY_THRESHOLDS, build_exposure_table, exposure_by_patient, exposure_schema,
                      read_postcodes, read_stations)
from .synthetic import SpecError, SyntheticSpec, dataset_config, dumps, generate_cohort, write_dataset

log = logging.getLogger("msrelapse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 2, 3, 4
INPUTS = ("stations", "postcodes", "patients", "relapses", "visits")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    paths: dict[str, Path]
    out: Path
    variables: list[str]
    thresholds: dict[str, float]
    static_columns: list[ColumnSpec]
    seed: int = 0
    threads: int = 1
    per_variable_station: bool = True
    experiment: dict = field(default_factory=dict)

    def experiment_config(self) -> ExperimentConfig:
        d = dict(self.experiment)
        d.setdefault("test_fraction", 0.30)
        d["split_seed"] = self.seed
        d["seed"] = self.seed
        d["cv"] = {"k": 4, "stratified": True, **d.get("cv", {}), "seed": self.seed}
        d["threads"] = self.threads
        try:
            return ExperimentConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"experiment: {exc}") from None


def _expand(value: str, where: str) -> str:
    try:
        return Template(value).substitute(os.environ)
    except KeyError as exc:
        raise ConfigError(f"{where}: environment variable {exc.args[0]} is not set") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _int_setting(flag, env: str, file_value, default: int, name: str) -> int:
    for source, raw in (("--" + name, flag), (env, os.environ.get(env)), ("config", file_value)):
        if raw is None or raw == "":
            continue
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: {source} value {raw!r} is not an integer") from None
    return default


def load_config(path: Path | None, seed=None, threads=None, out=None) -> RunConfig:
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = path.resolve().parent

    def resolve(p: str, where: str) -> Path:
        q = Path(_expand(str(p), where))
        return q if q.is_absolute() else base / q

    paths_raw = raw.get("paths", {})
    paths = {k: resolve(v, f"paths.{k}") for k, v in paths_raw.items() if k != "output_dir"}
    out_raw = out if out is not None else os.environ.get("MSRELAPSE_OUT") or paths_raw.get("output_dir", "out")
    out_dir = Path(out_raw) if out is not None else resolve(out_raw, "output_dir")
    try:
        static = [ColumnSpec.from_dict(c) for c in raw.get("static_columns", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"static_columns: {exc}") from None
    variables = list(raw.get("variables", ["pm10", "no2"]))
    thresholds = {k: float(v) for k, v in raw.get(
        "thresholds", {k: v for k, v in WHO_DAILY_THRESHOLDS.items() if k in variables}).items()}
    unknown = sorted(set(thresholds) - set(variables))
    if unknown:
        raise ConfigError(f"thresholds: {unknown[0]!r} is not a configured variable")
    cfg = RunConfig(
        paths=paths, out=out_dir, variables=variables, thresholds=thresholds, static_columns=static,
        seed=_int_setting(seed, "MSRELAPSE_SEED", raw.get("seed"), 0, "seed"),
        threads=_int_setting(threads, "MSRELAPSE_THREADS", raw.get("threads"), os.cpu_count() or 1, "threads"),
        per_variable_station=bool(raw.get("per_variable_station", True)),
        experiment=dict(raw.get("experiment", {})),
    )
    if cfg.threads < 1:
        raise ConfigError("threads: must be at least 1")
    return cfg


def require(cfg: RunConfig, *names: str) -> list[Path]:
    out = []
    for n in names:
        if n not in cfg.paths:
            raise ConfigError(f"paths.{n} is not configured")
        if not cfg.paths[n].is_file():
            raise ConfigError(f"paths.{n}: file not found: {cfg.paths[n]}")
        out.append(cfg.paths[n])
    return out


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_text(p: Path) -> io.StringIO:
    return io.StringIO(p.read_text())


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig | None) -> int:
    spec_dict = {}
    if args.config is not None:
        try:
            spec_dict = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"spec file {args.config}: {exc}") from None
        spec_dict = spec_dict.get("synthetic", spec_dict)
    seed = _int_setting(args.seed, "MSRELAPSE_SEED", spec_dict.get("seed"), 0, "seed")
    try:
        spec = SyntheticSpec.from_dict({**spec_dict, "seed": seed})
    except SpecError as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out or os.environ.get("MSRELAPSE_OUT") or "synthetic")
    ds = generate_cohort(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=".synth."))
    paths = write_dataset(ds, tmp)
    out.mkdir(parents=True, exist_ok=True)
    for k, p in paths.items():
        os.replace(p, out / p.name)
    os.rmdir(tmp)
    final = {k: out / p.name for k, p in paths.items()}
    write_atomic(out / "config.json", dumps(dataset_config(ds, final, out)))
    write_atomic(out / "spec.json", dumps(spec.to_dict()))
    n_rel = sum(1 for v in ds.relapses.values() if v)
    print(f"synth: {len(ds.patients)} patients ({n_rel} with relapses), {len(ds.stations)} stations -> {out}")
    return EXIT_OK


def cmd_link(args, cfg: RunConfig) -> int:
    st_path, pc_path, pt_path = require(cfg, "stations", "postcodes", "patients")
    stations = read_stations(_read_text(st_path))
    lookup = read_postcodes(_read_text(pc_path))
    static = read_static(_read_text(pt_path), cfg.static_columns)
    if not stations:
        log.warning("station file %s is empty; exposure table will be empty", st_path)
        table_text = io.StringIO()
        schema = exposure_schema(cfg.variables, cfg.thresholds)
        DataTable(schema, {s.name: [] for s in schema}).write_csv(table_text)
        write_atomic(cfg.out / "exposure.csv", table_text.getvalue())
        print("link: 0 exposure rows (no stations)")
        return EXIT_PARTIAL
    patients = [(r["patient_id"], r["postcode"]) for r in static]
    table, diag = build_exposure_table(patients, stations, lookup, cfg.variables, cfg.thresholds,
                                       per_variable=cfg.per_variable_station,
                                       windows=follow_up_windows(static))
    buf = io.StringIO()
    table.write_csv(buf)
    write_atomic(cfg.out / "exposure.csv", buf.getvalue())
    print(f"link: {table.n_rows} exposure rows for {len(patients) - len(diag)} of {len(patients)} patients")
    for d in diag:
        print(f"link: {d}", file=sys.stderr)
    return EXIT_PARTIAL if diag else EXIT_OK


def cmd_cohort(args, cfg: RunConfig) -> int:
    pt_path, rl_path, vs_path = require(cfg, "patients", "relapses", "visits")
    exp_path = cfg.paths.get("exposure", cfg.out / "exposure.csv")
    if not exp_path.is_file():
        raise ConfigError(f"exposure file not found: {exp_path} (run 'link' first)")
    static = read_static(_read_text(pt_path), cfg.static_columns)
    relapses = read_relapses(_read_text(rl_path))
    visits, subscores = read_visits(_read_text(vs_path))
    ratio_vars = [v for v in cfg.variables if v in cfg.thresholds]
    exposure = read_csv_table(_read_text(exp_path), exposure_schema(cfg.variables, ratio_vars))
    timelines = assemble_timelines(static, relapses, visits,
                                   exposure_by_patient(exposure, cfg.variables, ratio_vars))
    table, report = build_cohort(timelines, cfg.variables, ratio_vars, cfg.static_columns, subscores)
    buf = io.StringIO()
    table.write_csv(buf)
    write_atomic(cfg.out / "cohort.csv", buf.getvalue())
    write_atomic(cfg.out / "cohort_schema.json", dumps([s.to_dict() for s in table.schema]))
    write_atomic(cfg.out / "matching.json", dumps(report.to_dict()))
    print(f"cohort: {report.n_cases} cases, {len(report.pairs)} matched controls, "
          f"{len(report.unmatched)} unmatched cases")
    return EXIT_OK


def load_cohort(cfg: RunConfig):
    path = cfg.paths.get("cohort", cfg.out / "cohort.csv")
    schema_path = cfg.paths.get("cohort_schema", path.with_name("cohort_schema.json"))
    if not path.is_file() or not schema_path.is_file():
        raise ConfigError(f"cohort file or schema not found: {path} (run 'cohort' first)")
    schema = [ColumnSpec.from_dict(d) for d in json.loads(schema_path.read_text())]
    return read_csv_table(_read_text(path), schema)


def write_report(report: ExperimentReport, out: Path) -> None:
    for name, text in emit_all(report).items():
        write_atomic(out / name, text)


def cmd_run(args, cfg: RunConfig) -> int:
    cohort = load_cohort(cfg)
    report = run_experiment(cohort, cfg.experiment_config())
    write_report(report, cfg.out)
    print(f"run: {len(report.cells)} cells, status {report.status} -> {cfg.out}")
    return {"ok": EXIT_OK, "partial": EXIT_PARTIAL, "failed": EXIT_DATA}[report.status]


def cmd_report(args, cfg: RunConfig) -> int:
    path = cfg.out / "report.json"
    if not path.is_file():
        raise ConfigError(f"report not found: {path} (run 'run' first)")
    report = ExperimentReport.from_dict(json.loads(path.read_text()))
    write_report(report, cfg.out)
    print(f"report: regenerated artifacts in {cfg.out}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "link": cmd_link, "cohort": cmd_cohort, "run": cmd_run, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msrelapse", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="JSON run config (or synthetic spec for 'synth')")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _setup_logging(verbose: bool, out: Path | None) -> None:
    root = logging.getLogger("msrelapse")
    root.handlers.clear()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root.addHandler(console)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "msrelapse.log")
        fh.setLevel(logging.INFO)
        fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        root.addHandler(fh)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = None
        if args.command != "synth":
            cfg = load_config(args.config, args.seed, args.threads, args.out)
        _setup_logging(args.verbose, cfg.out if cfg else None)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SpecError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        for h in list(logging.getLogger("msrelapse").handlers):
            if isinstance(h, logging.FileHandler):
                h.close()
                logging.getLogger("msrelapse").removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
