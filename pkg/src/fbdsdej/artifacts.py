"""Deterministic artifact writers and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .spaces import EnsembleProcess


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not np.isfinite(o):
        return None
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats by None so the JSON stays standard."""
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, (float, np.floating)) and not np.isfinite(o):
        return None
    return o


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, default=_default, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> Path:
    path.write_text(dumps(obj), newline="\n")
    return path


def write_csv(path: Path, header: list[str], rows, run_id: str | None = None) -> Path:
    """CSV with '.' decimals, '\\n' line endings and a header row; an optional
    leading ``# run <id>`` comment ties the file to its manifest."""
    with open(path, "w", newline="") as fh:
        if run_id is not None:
            fh.write(f"# run {run_id}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def versions() -> dict:
    out = {"fbdsdej": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "scipy", "scikit-learn", "joblib", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def run_id(config_echo: dict, command: str) -> str:
    """Hash of everything that determines the results (no timestamps, no worker count)."""
    payload = dumps({"command": command, "config": config_echo, "versions": versions()})
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config_echo: dict, overrides: dict, rid: str,
                   artifacts: list[Path], timings: dict, status: dict, workers=None) -> Path:
    manifest = {
        "run": rid,
        "command": command,
        "config": config_echo,
        "overrides": overrides,
        "seed": config_echo.get("seed"),
        "workers": workers,
        "versions": versions(),
        "argv": sys.argv[1:],
        "timings": timings,
        "status": status,
        "artifacts": {p.name: sha256(p) for p in artifacts},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    return write_json(out / "manifest.json", manifest)


def trajectory_header(ens: EnsembleProcess) -> list[str]:
    v = ens.values
    d = v.y.shape[-1]
    d2, d1, m = v.z.shape[-1], v.Z.shape[-1], v.k.shape[-2]
    cols = ["path", "t"]
    cols += [f"y{i}" for i in range(d)] + [f"Y{i}" for i in range(d)]
    cols += [f"z{i}_{j}" for i in range(d) for j in range(d2)]
    cols += [f"Z{i}_{j}" for i in range(d) for j in range(d1)]
    cols += [f"k{j}_{i}" for j in range(m) for i in range(d)]
    return cols


def trajectory_rows(ens: EnsembleProcess, n_paths: int):
    v = ens.values
    t = ens.grid.nodes
    P = min(n_paths, ens.n_paths)
    flat = np.concatenate([a[:P].reshape(P, len(t), -1) for a in v.components()], axis=2)
    for p in range(P):
        for i in range(len(t)):
            yield [p, float(t[i]), *map(float, flat[p, i])]


def save_solution(path: Path, ens: EnsembleProcess) -> Path:
    """Full ensemble in an ``.npz`` archive, for ``verify --solution``."""
    arrays = dict(zip(ens.values._names, ens.values.components()))
    arrays["T"] = np.array(ens.grid.T)
    arrays["weights"] = ens.markspace.weight_array
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_solution(path: Path):
    from .noise import TimeGrid
    from .spaces import MarkSpace, StateQuintuple

    with np.load(path) as data:
        vals = StateQuintuple(*(data[n] for n in ("y", "Y", "z", "Z", "k")))
        grid = TimeGrid(float(data["T"]), vals.y.shape[1] - 1)
        return EnsembleProcess(grid, vals, MarkSpace(tuple(data["weights"])))
