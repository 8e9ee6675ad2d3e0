"""Run records: one JSON document per run, the single source for every table."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

RECORD_VERSION = 1
RECORD_FILE = "record.json"
TIMING_FILE = "timing.json"


@dataclass
class RunRecord:
    scenario: dict
    report: dict
    iterations: int = 0
    trajectory_path: str | None = None
    extras: dict = field(default_factory=dict)
    wall_time: float = 0.0  # kept out of record.json so records stay reproducible

    @property
    def success(self) -> bool:
        return bool(self.report.get("success", False))

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        d["record_version"] = RECORD_VERSION
        d["success"] = self.success
        if not include_timing:
            d.pop("wall_time")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / RECORD_FILE
        path.write_text(self.to_json() + "\n")
        (out / TIMING_FILE).write_text(json.dumps({"wall_time_s": self.wall_time}) + "\n")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        d = dict(d)
        d.pop("record_version", None)
        d.pop("success", None)
        return cls(**d)

    @classmethod
    def read(cls, path) -> RunRecord:
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_FILE
        rec = cls.from_dict(json.loads(path.read_text()))
        timing = path.parent / TIMING_FILE
        if timing.exists():
            rec.wall_time = float(json.loads(timing.read_text())["wall_time_s"])
        return rec


def collect(root) -> list[RunRecord]:
    """Every record below ``root``, in path order."""
    return [RunRecord.read(p) for p in sorted(Path(root).rglob(RECORD_FILE))]


def write_jsonl(path, rows) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path
