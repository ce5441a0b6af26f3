"""Small synthetic tables and CLI drivers shared by several test modules."""
import json
from pathlib import Path

import numpy as np
from scipy.special import expit

from msrelapse.cli import main
from msrelapse.data import ColumnSpec, DataTable


def numeric_table(columns: dict, y, category="environmental") -> DataTable:
    schema = [ColumnSpec(c, "numeric", category) for c in columns]
    schema.append(ColumnSpec("relapse", "binary", "outcome"))
    values = {c: np.asarray(v, dtype=float) for c, v in columns.items()}
    values["relapse"] = np.asarray(y, dtype=float)
    return DataTable(schema, values)


def informative_plus_noise(seed: int, n: int = 200, signal: float = 1.5) -> DataTable:
    """One feature carrying a logistic signal next to one independent noise feature."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    noise = rng.normal(size=n)
    y = (rng.random(n) < expit(signal * x)).astype(float)
    return numeric_table({"signal": x, "noise": noise}, y)


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def synth_to_cohort(root, spec: dict, seed: int, **run_kw):
    """Synthesize a dataset under ``root`` and build its cohort via the CLI; returns the config path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(spec))
    data = root / "data"
    assert run_cli("synth", "--config", spec_path, "--seed", seed, "--out", data) == 0
    cfg_path = data / "config.json"
    if run_kw:
        cfg = json.loads(cfg_path.read_text())
        cfg.update(run_kw)
        cfg_path.write_text(json.dumps(cfg))
    assert run_cli("link", "--config", cfg_path) in (0, 4)
    assert run_cli("cohort", "--config", cfg_path) == 0
    return cfg_path
