"""Shared invariant checker for closed-loop simulator runs.

Drives a simulation with wrapped policies, recording every decision, and
afterwards audits the episode log plus the full event trace against the
model's structural invariants: task conservation, the drop deadline, the
generate-at-will cycle, FIFO service order per edge, and the queue bound.
"""
from __future__ import annotations

import math

from aoisched.sim import EpisodeEnd, Simulation


def run_checked(sim: Simulation, policies) -> dict:
    cfg = sim.config
    if cfg.record_trace != "full":
        raise ValueError("invariant audit needs record_trace='full'")
    decisions = []
    last_time = 0.0
    while True:
        dp = sim.next_decision()
        if isinstance(dp, EpisodeEnd):
            break
        assert dp.sim_time >= last_time - 1e-12, "decision times regressed"
        last_time = dp.sim_time
        decisions.append(dp)
        if dp.kind == "updating":
            assert dp.offloading_state is None
            assert dp.updating_state is not None and dp.updating_state > 0
            if math.isfinite(sim.y_bar):
                assert dp.updating_state <= sim.y_bar + 1e-9, "updating state above y_bar"
            sim.apply_update_action(dp.device, policies[dp.device](dp))
        else:
            assert dp.updating_state is None
            q = dp.offloading_state
            assert len(q) == cfg.num_edges
            assert all(0 <= v <= cfg.num_devices for v in q), "queue bound violated"
            sim.apply_offload_action(dp.device, policies[dp.device](dp))
    log = sim.log
    audit_log(log)
    audit_trace(log)
    return {"log": log, "decisions": decisions}


def audit_log(log) -> None:
    cfg = log.config
    y_bar = cfg.y_bar
    for device in range(cfg.num_devices):
        tasks = log.device_tasks(device)
        # conservation: contiguous task indices, each resolved exactly once
        assert [t.k for t in tasks] == list(range(1, len(tasks) + 1))
        if cfg.horizon_tasks is not None and cfg.horizon_time is None:
            assert len(tasks) == cfg.horizon_tasks
        prev = None
        for t in tasks:
            assert t.dropped == (t.delay is None)
            if t.dropped:
                assert math.isfinite(y_bar)
                assert abs(t.resolve_time - (t.gen_time + y_bar)) < 1e-9, \
                    "drop must resolve exactly at gen + y_bar"
            else:
                assert t.delay <= y_bar + 1e-9, "completed delay above y_bar"
                assert abs((t.resolve_time - t.gen_time) - t.delay) < 1e-9
            if prev is not None:
                # generate-at-will: next generation = resolution + chosen wait
                assert t.gen_time >= prev.resolve_time - 1e-12, "overlapping tasks"
                assert abs(t.gen_time - (prev.resolve_time + t.wait_before)) < 1e-9
            prev = t


def audit_trace(log) -> None:
    """FIFO per edge: service starts follow arrival order."""
    arrivals: dict[int, list] = {}   # trace line "R t dev k edge"
    starts: dict[int, list] = {}     # trace line "S t edge dev k"
    for line in log.trace_lines:
        parts = line.split()
        if parts[0] == "R":
            edge = int(parts[4])
            arrivals.setdefault(edge, []).append((int(parts[2]), int(parts[3])))
        elif parts[0] == "S":
            edge = int(parts[2])
            starts.setdefault(edge, []).append((int(parts[3]), int(parts[4])))
    for edge, order in starts.items():
        arrived = arrivals.get(edge, [])
        # every served task arrived; service order preserves arrival order
        # (tasks dropped while waiting simply vanish from the sequence)
        pos = {pair: i for i, pair in enumerate(arrived)}
        indices = [pos[pair] for pair in order]
        assert indices == sorted(indices), f"edge {edge}: FIFO order violated"
