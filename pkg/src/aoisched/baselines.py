"""Non-learning reference policies for the simulator.

Each policy answers both decision kinds: a waiting time in [0, z_max] for
updating decisions and a route in {0} | {1..N} for offloading ones (0 means
local processing; edges are 1-indexed).  ``shortest_queue`` is a sanity
baseline that is not part of the published comparison set and is labelled as
such by the harness.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["BaselineKind", "BaselinePolicy", "act", "KINDS"]

RANDOM = "random"
ZERO_WAIT_RANDOM_ROUTE = "zero_wait_random_route"
ZERO_WAIT_SHORTEST_QUEUE = "zero_wait_shortest_queue"
ALWAYS_LOCAL_ZERO_WAIT = "always_local_zero_wait"
FIXED_WAIT = "fixed_wait"

KINDS = (
    RANDOM,
    ZERO_WAIT_RANDOM_ROUTE,
    ZERO_WAIT_SHORTEST_QUEUE,
    ALWAYS_LOCAL_ZERO_WAIT,
    FIXED_WAIT,
)


@dataclass(frozen=True)
class BaselineKind:
    """Policy selector; ``fixed_wait`` carries its constant waiting time."""

    kind: str
    wait: float | None = None
    allow_local: bool = False   # shortest_queue only: include route 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.kind == FIXED_WAIT:
            if self.wait is None or self.wait < 0:
                raise ValueError("fixed_wait needs a nonnegative waiting time")

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        """Parse 'random', 'fixed_wait:0.5', etc."""
        name, _, arg = text.partition(":")
        if name == FIXED_WAIT:
            return cls(FIXED_WAIT, wait=float(arg))
        return cls(name)

    def label(self) -> str:
        if self.kind == FIXED_WAIT:
            return f"{FIXED_WAIT}:{self.wait!r}"
        return self.kind


def act(kind: BaselineKind, decision, rng: np.random.Generator, z_max: float):
    """Action for one decision point.

    Updating decisions return a waiting time, offloading decisions a route.
    Random choices draw from ``rng``; shortest-queue ties break to the lowest
    edge index.  fixed_wait waits a constant and routes uniformly at random.
    """
    if decision.kind == "updating":
        if kind.kind == RANDOM:
            return float(rng.uniform(0.0, z_max))
        if kind.kind == FIXED_WAIT:
            if kind.wait > z_max:
                raise ValueError("fixed_wait exceeds z_max")
            return float(kind.wait)
        return 0.0
    q = decision.offloading_state
    n_edges = len(q)
    if kind.kind in (RANDOM, ZERO_WAIT_RANDOM_ROUTE, FIXED_WAIT):
        return int(rng.integers(0, n_edges + 1))
    if kind.kind == ZERO_WAIT_SHORTEST_QUEUE:
        best = int(np.argmin(q))  # lowest index wins ties
        if kind.allow_local and q[best] > 0:
            return 0
        return best + 1
    return 0  # always_local_zero_wait


class BaselinePolicy:
    """Callable per-device policy wrapping ``act`` with its own rng stream."""

    def __init__(self, kind: BaselineKind, z_max: float, seed):
        self.kind = kind
        self.z_max = z_max
        self.rng = np.random.default_rng(seed)

    def __call__(self, decision):
        return act(self.kind, decision, self.rng, self.z_max)
