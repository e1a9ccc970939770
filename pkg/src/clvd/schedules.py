"""Epoch-indexed curriculum schedules for input noise and dropout.

Both schedules start at zero on epoch 0, ramp up to their maximum at
``e_max`` and stay there.  The noise ramp is linear, the dropout ramp follows
a square root so capacity is removed early and then tapers off.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Union


@dataclass(frozen=True)
class NoiseSchedule:
    """Standard deviation of Gaussian input noise as a function of epoch."""

    sigma_max: float = 0.3
    e_max: int = 25

    def __post_init__(self):
        if not (self.sigma_max >= 0 and math.isfinite(self.sigma_max)):
            raise ValueError(f"sigma_max must be a finite value >= 0, got {self.sigma_max}")
        if int(self.e_max) != self.e_max or self.e_max < 1:
            raise ValueError(f"e_max must be a positive integer, got {self.e_max}")

    def __call__(self, epoch: int) -> float:
        return sigma_at(self, epoch)


@dataclass(frozen=True)
class DropoutSchedule:
    """Dropout rate as a function of epoch."""

    delta_max: float = 0.25
    e_max: int = 25

    def __post_init__(self):
        if not 0 <= self.delta_max < 1:
            raise ValueError(f"delta_max must lie in [0, 1), got {self.delta_max}")
        if int(self.e_max) != self.e_max or self.e_max < 1:
            raise ValueError(f"e_max must be a positive integer, got {self.e_max}")

    def __call__(self, epoch: int) -> float:
        return delta_at(self, epoch)


Schedule = Union[NoiseSchedule, DropoutSchedule]


def _check_epoch(epoch):
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")


def sigma_at(schedule: NoiseSchedule, epoch: int) -> float:
    """Linear ramp ``sigma_max * E / e_max`` clamped at ``sigma_max``."""
    _check_epoch(epoch)
    if epoch >= schedule.e_max:
        return float(schedule.sigma_max)
    return min(schedule.sigma_max, schedule.sigma_max * epoch / schedule.e_max)


def delta_at(schedule: DropoutSchedule, epoch: int) -> float:
    """Square-root ramp ``delta_max * sqrt(E / e_max)`` clamped at ``delta_max``."""
    _check_epoch(epoch)
    if epoch >= schedule.e_max:
        return float(schedule.delta_max)
    return min(schedule.delta_max, schedule.delta_max * math.sqrt(epoch / schedule.e_max))


def value_at(schedule: Schedule, epoch: int) -> float:
    if isinstance(schedule, NoiseSchedule):
        return sigma_at(schedule, epoch)
    if isinstance(schedule, DropoutSchedule):
        return delta_at(schedule, epoch)
    raise TypeError(f"not a schedule: {schedule!r}")


def schedule_table(schedule: Schedule, total_epochs: int) -> list[tuple[int, float]]:
    """Rows ``(epoch, value)`` for every epoch in ``[0, total_epochs]``."""
    if total_epochs < 0:
        raise ValueError(f"total_epochs must be non-negative, got {total_epochs}")
    return [(e, value_at(schedule, e)) for e in range(total_epochs + 1)]


def table_to_csv(rows: list[tuple[int, float]]) -> str:
    # repr() round-trips floats exactly and is locale independent
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "value"])
    for epoch, value in rows:
        writer.writerow([epoch, repr(float(value))])
    return buf.getvalue()


def write_schedule_csv(schedule: Schedule, total_epochs: int, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(table_to_csv(schedule_table(schedule, total_epochs)))
