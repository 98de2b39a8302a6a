"""Oracle scale selection, accuracy-vs-tokens curves and token-budget arithmetic."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np


def _check_schedule(schedule: Sequence[int]) -> list[int]:
    sched = [int(s) for s in schedule]
    if not sched or sched[0] < 1 or any(b <= a for a, b in zip(sched, sched[1:])):
        raise ValueError(f"schedule must be a non-empty strictly increasing list of positive sizes, got {sched}")
    return sched


@dataclass
class CorrectnessMatrix:
    schedule: list[int]
    rows: np.ndarray  # (N, M) bool
    sample_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.schedule = _check_schedule(self.schedule)
        self.rows = np.asarray(self.rows, dtype=bool).reshape(-1, len(self.schedule)) if np.size(self.rows) else \
            np.zeros((0, len(self.schedule)), dtype=bool)
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(len(self.rows))]
        if len(self.sample_ids) != len(self.rows):
            raise ValueError("one sample id per row required")

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", *self.schedule])
            for sid, row in zip(self.sample_ids, self.rows):
                w.writerow([sid, *(int(v) for v in row)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "CorrectnessMatrix":
        with open(path, newline="") as f:
            return cls.parse(f.read())

    @classmethod
    def parse(cls, text: str) -> "CorrectnessMatrix":
        reader = csv.reader(io.StringIO(text))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError("empty correctness matrix file") from None
        if not header or header[0] != "sample_id":
            raise ValueError("first column must be sample_id")
        try:
            schedule = [int(h) for h in header[1:]]
        except ValueError:
            raise ValueError(f"scale columns must be integer token counts, got {header[1:]}") from None
        ids, rows = [], []
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise ValueError(f"row {line[0]!r} has {len(line) - 1} entries, expected {len(schedule)}")
            vals = [v.strip() for v in line[1:]]
            if any(v not in ("0", "1") for v in vals):
                raise ValueError(f"row {line[0]!r}: entries must be 0 or 1")
            ids.append(line[0].strip())
            rows.append([v == "1" for v in vals])
        return cls(schedule, np.array(rows, dtype=bool), ids)


@dataclass
class OracleReport:
    mean_tokens: float
    accuracy: float
    chosen: list[int]
    correct: list[bool]
    fixed_scale_accuracy: list[float]
    schedule: list[int]

    def to_dict(self) -> dict:
        return {
            "mean_tokens": self.mean_tokens,
            "oracle_accuracy": self.accuracy,
            "schedule": self.schedule,
            "fixed_scale_accuracy": dict(zip(map(str, self.schedule), self.fixed_scale_accuracy)),
            "chosen_scale": self.chosen,
            "correct": self.correct,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def oracle_select(row: Sequence[bool], schedule: Sequence[int]) -> tuple[int, bool]:
    """Fewest tokens that still answer correctly.

    A row that is wrong everywhere is charged the smallest scale and counted
    as incorrect.
    """
    schedule = _check_schedule(schedule)
    if len(row) != len(schedule):
        raise ValueError(f"row has {len(row)} entries but the schedule has {len(schedule)} scales")
    for size, ok in zip(schedule, row):
        if ok:
            return size, True
    return schedule[0], False


def oracle_aggregate(matrix: CorrectnessMatrix) -> OracleReport:
    if len(matrix) == 0:
        raise ValueError("correctness matrix is empty")
    sched = matrix.schedule
    rows = matrix.rows
    any_ok = rows.any(axis=1)
    first = np.where(any_ok, rows.argmax(axis=1), 0)
    chosen = np.asarray(sched)[first]
    return OracleReport(
        mean_tokens=float(chosen.mean()),
        accuracy=float(any_ok.mean()),
        chosen=[int(c) for c in chosen],
        correct=[bool(c) for c in any_ok],
        fixed_scale_accuracy=accuracy_curve(matrix),
        schedule=list(sched),
    )


def accuracy_curve(matrix: CorrectnessMatrix) -> list[float]:
    """Accuracy at each fixed scale, coarsest first."""
    if len(matrix) == 0:
        raise ValueError("correctness matrix is empty")
    return [float(v) for v in matrix.rows.mean(axis=0)]


def budget_allocations(total_budget: int, schedule: Sequence[int]) -> list[tuple[int, int]]:
    """``(units, tokens per unit)`` for each scale that fits a fixed token budget,
    e.g. frames of a video at a given per-frame resolution."""
    schedule = _check_schedule(schedule)
    if total_budget < schedule[0]:
        raise ValueError(f"budget {total_budget} is below the smallest scale {schedule[0]}")
    return [(total_budget // s, s) for s in schedule if total_budget // s >= 1]
