"""Loading and schema validation for simulator run directories."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TRAJ_SCHEMA = "bohmsim.trajectories/1"
SUMMARY_SCHEMA = "bohmsim.summary/1"


class SchemaMismatchError(RuntimeError):
    """Input file carries a schema this reader does not understand."""

    def __init__(self, found: str, expected: str, path: Path):
        self.found = found
        self.expected = expected
        super().__init__(f"{path}: schema {found!r}, expected {expected!r}")


@dataclass
class RunData:
    """One run directory: per-trajectory sample arrays plus the summary."""

    columns: list[str]
    trajectories: dict[int, np.ndarray]   # traj_id -> (samples, columns) array
    summary: dict

    def column(self, name: str) -> int:
        if name not in self.columns:
            raise KeyError(
                f"trajectories.csv has no column {name!r}; have {self.columns}"
            )
        return self.columns.index(name)

    def side_of(self, traj_id: int) -> str:
        per = self.summary.get("per_trajectory", [])
        if traj_id < len(per) and per[traj_id]["id"] == traj_id:
            return per[traj_id]["initial_side"]
        for rec in per:
            if rec["id"] == traj_id:
                return rec["initial_side"]
        return "top"


def load_trajectories(path: Path) -> tuple[list[str], dict[int, np.ndarray]]:
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# schema="):
        raise SchemaMismatchError("<missing>", TRAJ_SCHEMA, path)
    found = lines[0].split("=", 1)[1].strip()
    if found != TRAJ_SCHEMA:
        raise SchemaMismatchError(found, TRAJ_SCHEMA, path)
    reader = csv.reader(lines[1:])
    header = next(reader)
    rows_by_traj: dict[int, list[list[float]]] = {}
    for row in reader:
        if not row:
            continue
        tid = int(row[0])
        rows_by_traj.setdefault(tid, []).append([float(x) for x in row[1:]])
    columns = header[1:]
    return columns, {tid: np.array(rows) for tid, rows in rows_by_traj.items()}


def load_summary(path: Path) -> dict:
    summary = json.loads(path.read_text())
    found = summary.get("schema", "<missing>")
    if found != SUMMARY_SCHEMA:
        raise SchemaMismatchError(found, SUMMARY_SCHEMA, path)
    return summary


def load_run(run_dir: str | Path) -> RunData:
    run_dir = Path(run_dir)
    csv_path = run_dir / "trajectories.csv"
    summary_path = run_dir / "summary.json"
    for p in (csv_path, summary_path):
        if not p.exists():
            raise FileNotFoundError(f"run directory {run_dir} is missing {p.name}")
    columns, trajectories = load_trajectories(csv_path)
    return RunData(columns=columns, trajectories=trajectories, summary=load_summary(summary_path))
