"""Exact age-of-information accounting and per-task scheduling costs.

The age of a device is the time elapsed since the generation stamp of its
most recently completed task: a sawtooth that climbs at slope one and drops
to the just-completed task's delay at every completion.  Dropped tasks cause
no reset.  This module integrates that sawtooth exactly, decomposes it into
per-interval trapezoid areas, converts completed-task triples (Y_k, Z_{k+1},
Y_{k+1}) into the scheduling costs consumed by learners, and maintains the
per-episode numerator/denominator ledger whose quotient is the realized
average age.

Two record-extraction modes exist for traces that contain drops:

* ``exact``: one record per consecutive completed pair, with the waiting
  entry stretched to the true generation gap.  Summed areas reproduce the
  sawtooth integral exactly.
* ``fold_drops`` (ledger default): the waiting entry is the waiting time the
  device actually chose after the earlier completion, and the whole span
  from that first attempt to the next completion is charged as the next
  delay.  Costs then line up one-to-one with the actions the device took,
  and dropped time is paid for inside the inflated delay.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

__all__ = [
    "AoiError",
    "AoiTracker",
    "AoiSummary",
    "CostLedger",
    "GammaUpdate",
    "trapezoid_area",
    "sawtooth_integral",
    "integrate_age",
    "average_aoi",
    "device_records",
    "ratio_estimator",
    "task_cost",
    "episode_gamma_update",
    "FOLD_DROPS",
    "EXACT",
]

FOLD_DROPS = "fold_drops"
EXACT = "exact"


class AoiError(Exception):
    """Raised for undefined age queries (empty traces, bad windows)."""


def trapezoid_area(y_k: float, z_next: float, y_next: float) -> float:
    """Age contribution of one completed interval.

    Equals 0.5*(y_k + z_next + y_next)**2 - 0.5*y_next**2, the area of the
    sawtooth trapezoid spanned between the two completions.
    """
    if y_k < 0 or z_next < 0 or y_next < 0:
        raise AoiError("trapezoid arguments must be nonnegative")
    total = y_k + z_next + y_next
    return 0.5 * total * total - 0.5 * y_next * y_next


def sawtooth_integral(
    completions: Sequence[tuple[float, float]],
    t0: float,
    t1: float,
    age0: float = 0.0,
) -> float:
    """Exact integral of the age sawtooth over [t0, t1].

    ``completions`` holds (completion_time, reset_age) pairs sorted by time;
    entries at or before t0 re-derive the starting age, entries after t1 are
    ignored.  ``age0`` is the age at t0 when no earlier completion exists.
    """
    if t1 < t0:
        raise AoiError("window end precedes window start")
    t, age = t0, age0
    total = 0.0
    for tc, reset in completions:
        if reset < 0:
            raise AoiError("reset age must be nonnegative")
        if tc <= t0:
            age = (t0 - tc) + reset
            continue
        if tc > t1:
            break
        seg = tc - t
        total += seg * (age + 0.5 * seg)
        age = reset
        t = tc
    seg = t1 - t
    total += seg * (age + 0.5 * seg)
    return total


@dataclass
class AoiTracker:
    """Online exact integrator for one device's age process.

    The basis time is the generation stamp the age is currently measured
    against; before any completion it is the device's first generation
    instant, so the age starts at zero there.
    """

    device: int
    basis: float          # generation stamp of the most recent completion
    clock: float
    integral: float = 0.0

    @property
    def age(self) -> float:
        return self.clock - self.basis

    def advance(self, t: float) -> None:
        if t < self.clock - 1e-12:
            raise AoiError("tracker cannot move backwards in time")
        seg = t - self.clock
        if seg > 0:
            self.integral += seg * (self.age + 0.5 * seg)
            self.clock = t

    def observe_completion(self, t_done: float, gen_time: float) -> None:
        """Advance to the completion instant, then reset to that task's delay."""
        self.advance(t_done)
        if gen_time < self.basis:
            raise AoiError("completions must carry nondecreasing generation stamps")
        self.basis = gen_time


def _device_tasks(log, device: int):
    tasks = log.device_tasks(device)
    if not tasks:
        raise AoiError(f"device {device} has no resolved tasks in the trace")
    return tasks


def integrate_age(log, device: int, t0: float | None = None, t1: float | None = None) -> float:
    """Exact sawtooth integral for one device of an episode log.

    The age is zero at the device's first generation instant; completions
    reset it to the completed delay, drops do not.  Defaults integrate from
    the first generation to the last task resolution.
    """
    tasks = _device_tasks(log, device)
    origin = tasks[0].gen_time
    completions = [(t.resolve_time, t.delay) for t in tasks if not t.dropped]
    t0 = origin if t0 is None else t0
    t1 = tasks[-1].resolve_time if t1 is None else t1
    if t0 < origin:
        raise AoiError("window starts before the first generation")
    return sawtooth_integral(completions, t0, t1, age0=t0 - origin)


class AoiSummary(NamedTuple):
    """Time-average age plus the paper-style ratio estimate."""

    time_average: float
    ratio_estimate: float | None
    degenerate: bool          # fewer than two completions: no ratio estimate


def device_records(log, device: int, mode: str = FOLD_DROPS) -> list[tuple[float, float, float]]:
    """(Y_k, Z_{k+1}, Y_{k+1}) triples for consecutive completed tasks."""
    if mode not in (FOLD_DROPS, EXACT):
        raise AoiError(f"unknown record mode {mode!r}")
    tasks = _device_tasks(log, device)
    records = []
    prev_completed = None
    prev_idx = -1
    for idx, t in enumerate(tasks):
        if t.dropped:
            continue
        if prev_completed is not None:
            if mode == EXACT:
                z = t.gen_time - prev_completed.resolve_time
                y_next = t.delay
            else:
                first_attempt = tasks[prev_idx + 1]
                z = first_attempt.wait_before
                y_next = t.resolve_time - first_attempt.gen_time
            records.append((prev_completed.delay, z, y_next))
        prev_completed = t
        prev_idx = idx
    return records


def ratio_estimator(records: Iterable[tuple[float, float, float]]) -> float:
    """Sum of trapezoid areas over the summed interval lengths."""
    records = list(records)
    if not records:
        raise AoiError("ratio estimator needs at least one record")
    num = math.fsum(trapezoid_area(y, z, y2) for y, z, y2 in records)
    den = math.fsum(y + z for y, z, _ in records)
    if den <= 0:
        raise AoiError("ratio estimator denominator must be positive")
    return num / den


def average_aoi(log, device: int, t1: float | None = None) -> AoiSummary:
    """Time-average age over the logged horizon, plus the ratio estimate.

    The ratio estimate uses exact-mode records (consecutive completed pairs);
    with fewer than two completions it is None and the summary is flagged
    degenerate.
    """
    tasks = _device_tasks(log, device)
    origin = tasks[0].gen_time
    end = tasks[-1].resolve_time if t1 is None else t1
    if end <= origin:
        raise AoiError("empty integration window")
    integral = integrate_age(log, device, t1=end)
    records = device_records(log, device, mode=EXACT)
    if records:
        return AoiSummary(integral / (end - origin), ratio_estimator(records), False)
    return AoiSummary(integral / (end - origin), None, True)


def task_cost(
    y_k: float,
    z_next: float,
    y_next: float,
    gamma: float | None = None,
    mode: str = "fractional",
) -> float:
    """Per-interval scheduling cost.

    fractional: A(y, z, y') - gamma * (y + z), the scalarized cost whose
    root in gamma is the average age.  ratio: A(y, z, y') / (y + z), the
    expectation-of-ratio benchmark cost (gamma unused).
    """
    area = trapezoid_area(y_k, z_next, y_next)
    if mode == "fractional":
        if gamma is None:
            raise AoiError("fractional cost needs gamma")
        return area - gamma * (y_k + z_next)
    if mode == "ratio":
        den = y_k + z_next
        if den <= 0:
            raise AoiError("ratio cost undefined for zero interval")
        return area / den
    raise AoiError(f"unknown cost mode {mode!r}")


@dataclass
class CostLedger:
    """Per-device, per-episode numerator/denominator bookkeeping.

    n_total and d_total accumulate trapezoid areas and interval lengths as
    records arrive; the episode's quotient update recomputes both with
    compensated summation over the stored records so it matches the ratio
    estimator bit for bit.
    """

    device: int
    episode: int
    gamma: float = 0.0
    n_total: float = 0.0
    d_total: float = 0.0
    records: list[tuple[float, float, float]] = field(default_factory=list)

    def add_record(self, y_k: float, z_next: float, y_next: float) -> None:
        self.n_total += trapezoid_area(y_k, z_next, y_next)
        self.d_total += y_k + z_next
        self.records.append((y_k, z_next, y_next))

    def record_cost(self, y_k: float, z_next: float, y_next: float, mode: str = "fractional") -> float:
        """Add a record and return its cost at the ledger's current gamma."""
        self.add_record(y_k, z_next, y_next)
        return task_cost(y_k, z_next, y_next, self.gamma, mode)


class GammaUpdate(NamedTuple):
    gamma: float
    carried: bool     # true when an empty episode re-used the previous value


def episode_gamma_update(ledger: CostLedger) -> GammaUpdate:
    """End-of-episode quotient update: realized area over realized time.

    An episode without completed records carries the previous gamma forward
    and flags it.
    """
    if not ledger.records:
        return GammaUpdate(ledger.gamma, True)
    return GammaUpdate(ratio_estimator(ledger.records), False)
