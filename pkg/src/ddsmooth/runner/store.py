"""Append-only JSON-lines results store."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

VOLATILE_FIELDS = ("wall_time_s", "timestamp")


@dataclass(frozen=True)
class ExperimentRecord:
    fingerprint: str
    attack: dict
    defense: dict
    task: str
    metric: str
    value: float
    n_images: int
    wall_time_s: float
    timestamp: str

    @property
    def key(self) -> tuple:
        return (self.fingerprint, attack_label(self.attack), defense_label(self.defense), self.task, self.metric)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False, allow_nan=False, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentRecord":
        return cls(**d)


def attack_label(a: dict) -> str:
    if a.get("method", "none") == "none":
        return "none"
    return f"{a['method']}/{a['noise_level']}/{float(a['p_diffusion']):.1f}"


def defense_label(d: dict) -> str:
    if d.get("mode", "none") == "none":
        return "none"
    return d["level"]["kind"]


class DuplicateRecordError(ValueError):
    pass


class ResultsStore:
    """``results.jsonl``: one record per line; existing lines are never rewritten."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._keys: set[tuple] = set()
        self._records: list[ExperimentRecord] = []
        if self.path.exists():
            with self.path.open(encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    rec = ExperimentRecord.from_dict(json.loads(line))
                    if rec.key in self._keys:
                        raise DuplicateRecordError(f"{self.path}:{lineno}: duplicate record {rec.key}")
                    self._keys.add(rec.key)
                    self._records.append(rec)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: tuple) -> bool:
        return key in self._keys

    @property
    def records(self) -> list[ExperimentRecord]:
        return list(self._records)

    def append(self, records: list[ExperimentRecord]) -> None:
        with self._lock:
            for r in records:
                if r.key in self._keys:
                    raise DuplicateRecordError(f"duplicate record {r.key}")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                for r in records:
                    f.write(r.to_json() + "\n")
                    self._keys.add(r.key)
                    self._records.append(r)


def load_records(path) -> list[ExperimentRecord]:
    return ResultsStore(path).records


def stable_view(path) -> list[dict]:
    """Records with the volatile timing fields removed (for reproducibility checks)."""
    out = []
    for r in load_records(path):
        d = asdict(r)
        for k in VOLATILE_FIELDS:
            d.pop(k)
        out.append(d)
    return out
