"""Deterministic CSV/JSON serialization of trajectories, tables and verdicts.

Floats are written with ``repr``, the shortest decimal that round-trips, so
reading a file back reproduces the in-memory values exactly and identical
inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import TrajectoryRecord
from .model import KernelSpec, ModelParams

INT_COLUMNS = frozenset({"particle", "realization", "n", "step"})
DIAGNOSTIC_COLUMNS = ("t", "S", "lyapunov_V", "generator_LV", "L_std", "L_tilde")
MANIFEST = "manifest.json"
RUN_INFO = "run_info.json"


class OutputError(OSError):
    """Writing or reading an artifact failed; the message carries the path."""


def fmt(value) -> str:
    return repr(float(value))


@dataclass(eq=False)
class Table:
    """Named float columns, stored row-major as ``(R, C)``."""

    columns: tuple
    rows: np.ndarray

    def __post_init__(self) -> None:
        self.columns = tuple(self.columns)
        self.rows = np.asarray(self.rows, dtype=float).reshape(-1, len(self.columns))

    def col(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Table):
            return NotImplemented
        return self.columns == other.columns and np.array_equal(self.rows, other.rows)


def _open(path, mode):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, newline="", encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot open {path}: {exc.strerror}") from exc


def write_table(table: Table, path) -> Path:
    int_cols = [c in INT_COLUMNS for c in table.columns]
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([str(int(x)) if is_int else fmt(x) for x, is_int in zip(row, int_cols)])
    return Path(path)


def read_table(path) -> Table:
    with _open(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in r] for r in reader]
    return Table(tuple(header), np.array(rows, dtype=float).reshape(-1, len(header)))


def trajectory_columns(dim: int) -> tuple:
    return ("t", "particle") + tuple(f"x{k + 1}" for k in range(dim)) + tuple(f"v{k + 1}" for k in range(dim))


def trajectory_table(record: TrajectoryRecord) -> Table:
    K, n, d = record.positions.shape
    t = np.repeat(record.times, n)
    idx = np.tile(np.arange(n), K)
    rows = np.column_stack([t, idx, record.positions.reshape(K * n, d), record.velocities.reshape(K * n, d)])
    return Table(trajectory_columns(d), rows)


def params_dict(params: ModelParams) -> dict:
    return {
        "kappa": params.kappa,
        "sigma": params.sigma,
        "kernel": params.kernel.label(),
        "psi_min": params.kernel.psi_min,
        "psi_max": params.kernel.psi_max,
        "n": params.n,
        "dim": params.dim,
        "compensated": params.compensated,
    }


def write_trajectory(record: TrajectoryRecord, path, diagnostics: Optional[dict] = None) -> list[Path]:
    """Trajectory CSV plus a sidecar ``<stem>.json`` summary."""
    path = Path(path)
    write_table(trajectory_table(record), path)
    summary = {
        "seed": record.noise_seed,
        "params": params_dict(record.params),
        "centered": record.centered,
        "halted": record.halted,
        "snapshots": len(record.times),
        "t_final": float(record.times[-1]),
        "final_diagnostics": diagnostics or {},
    }
    side = path.with_suffix(".json")
    write_json(summary, side)
    return [path, side]


def read_trajectory(path, params: ModelParams, noise_seed: int, centered: bool = False) -> TrajectoryRecord:
    """Inverse of ``write_trajectory`` for the CSV part."""
    table = read_table(path)
    d = (len(table.columns) - 2) // 2
    if table.columns != trajectory_columns(d):
        raise ValueError(f"{path}: unexpected header {table.columns}")
    n = int(table.col("particle").max()) + 1
    K = len(table) // n
    rows = table.rows.reshape(K, n, -1)
    return TrajectoryRecord(rows[:, 0, 0].copy(), rows[:, :, 2 : 2 + d].copy(), rows[:, :, 2 + d :].copy(), noise_seed, params, centered)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        # JSON has no inf/nan; keep them readable and reversible
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, KernelSpec):
        return obj.label()
    if dataclasses.is_dataclass(obj):
        return _plain(dataclasses.asdict(obj))
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj, path) -> Path:
    with _open(path, "w") as fh:
        fh.write(dumps(obj))
    return Path(path)


def read_json(path) -> dict:
    with _open(path, "r") as fh:
        return json.load(fh)


def write_text(text: str, path) -> Path:
    with _open(path, "w") as fh:
        fh.write(text)
    return Path(path)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, files: Iterable, extra: Optional[dict] = None, timestamp: Optional[str] = None) -> Path:
    """Hash every artifact into ``manifest.json``.

    The manifest itself is deterministic.  A wall-clock ``timestamp`` goes to
    the separate ``run_info.json``, which the manifest does not hash.
    """
    out_dir = Path(out_dir)
    names = sorted({Path(f).resolve().relative_to(out_dir.resolve()).as_posix() for f in files})
    entries = {name: sha256(out_dir / name) for name in names}
    manifest = {"files": entries, **(extra or {})}
    path = write_json(manifest, out_dir / MANIFEST)
    if timestamp is not None:
        write_json({"timestamp": timestamp}, out_dir / RUN_INFO)
    return path


def diagnostics_table(rows: Sequence[Sequence[float]]) -> Table:
    return Table(DIAGNOSTIC_COLUMNS, np.asarray(rows, dtype=float))


def relpath(path, root) -> str:
    return os.path.relpath(path, root).replace(os.sep, "/")
