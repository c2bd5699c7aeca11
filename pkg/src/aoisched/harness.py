"""Experiment harness: seeded runs, parameter sweeps, convergence reports.

An experiment is a simulator configuration plus a policy assignment, an
episode plan and a seed list.  Every (seed, episode, device) cell yields the
realized time-average age, the device's quotient coefficient in effect
during that episode, and its drop rate; aggregates are exact means and
standard deviations across seeds.  Output is CSV only; identical specs and
seeds produce byte-identical files.

Sweeps rerun the experiment along one environment axis (edge capacity, drop
coefficient, task density, device capacity, or device count).  Convergence
reports turn a quotient-iteration trace into the linear-rate diagnostics
with a pass/fail verdict.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .aoi import CostLedger, average_aoi, device_records, episode_gamma_update
from .baselines import BaselineKind, BaselinePolicy
from .bridge import BridgeError, BridgeServer
from .fql import FqlTrace, rate_diagnostics
from .sim import ConfigError, SimConfig, Simulation, config_from_text, run_with_policies

__all__ = [
    "HarnessError",
    "ExperimentSpec",
    "ResultRow",
    "ResultsTable",
    "run_experiment",
    "sweep",
    "SWEEP_AXES",
    "ConvergenceReport",
    "convergence_report",
    "spec_from_text",
    "spec_to_text",
]

SWEEP_AXES = (
    "edge_capacity",
    "drop_coefficient",
    "task_density",
    "device_capacity",
    "num_devices",
)


class HarnessError(Exception):
    """Configuration or execution failure of an experiment."""


@dataclass
class ExperimentSpec:
    """One experiment: environment, policy, episode plan, seeds.

    ``policy`` is a baseline label (see baselines.KINDS; ``fixed_wait:Z``
    carries its constant) applied to every device, or ``bridge:HOST:PORT``
    to expose the devices to an external learning client at that endpoint.
    ``steps`` is the per-device resolved-task budget of one episode.
    """

    sim: SimConfig = field(default_factory=SimConfig)
    policy: str = "random"
    episodes: int = 10
    steps: int = 200
    gamma_update_period: int = 50
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    cost_mode: str = "fractional"
    gamma0: float = 0.0

    def validate(self) -> None:
        if not self.seeds:
            raise HarnessError("seeds list must not be empty")
        if self.episodes < 1 or self.steps < 1:
            raise HarnessError("episodes and steps must be positive")
        if self.gamma_update_period < 1:
            raise HarnessError("gamma_update_period must be positive")
        if self.cost_mode not in ("fractional", "ratio"):
            raise HarnessError(f"unknown cost_mode {self.cost_mode!r}")
        if not (self.policy.startswith("bridge:") or self._baseline() is not None):
            raise HarnessError(f"unknown policy {self.policy!r}")
        self.sim.validate()

    def _baseline(self) -> BaselineKind | None:
        try:
            return BaselineKind.parse(self.policy)
        except (ValueError, TypeError):
            return None

    def episode_config(self, seed: int, episode: int) -> SimConfig:
        """Fresh per-episode environment seed derived from (seed, episode)."""
        return replace(
            self.sim, seed=_derive_seed(seed, episode),
            horizon_tasks=self.steps, horizon_time=None, record_trace="off",
        )


def _derive_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


@dataclass(frozen=True)
class ResultRow:
    seed: int
    episode: int
    device: int
    avg_aoi: float
    gamma: float
    drop_rate: float


@dataclass
class ResultsTable:
    """Per-cell rows plus exact cross-seed aggregates."""

    policy: str
    rows: list[ResultRow] = field(default_factory=list)

    def seed_episode_mean(self, seed: int, episode: int) -> float:
        vals = [r.avg_aoi for r in self.rows if r.seed == seed and r.episode == episode]
        return float(np.mean(vals))

    def aggregate(self) -> list[tuple[int, float, float]]:
        """(episode, mean, std-across-seeds) of the device-averaged age."""
        episodes = sorted({r.episode for r in self.rows})
        seeds = sorted({r.seed for r in self.rows})
        out = []
        for ep in episodes:
            per_seed = [self.seed_episode_mean(s, ep) for s in seeds]
            ddof = 1 if len(per_seed) > 1 else 0
            out.append((ep, float(np.mean(per_seed)), float(np.std(per_seed, ddof=ddof))))
        return out

    def overall_mean_std(self) -> tuple[float, float]:
        """Mean across seeds of per-seed overall means, and its stddev."""
        seeds = sorted({r.seed for r in self.rows})
        per_seed = [
            float(np.mean([r.avg_aoi for r in self.rows if r.seed == s]))
            for s in seeds
        ]
        ddof = 1 if len(per_seed) > 1 else 0
        return float(np.mean(per_seed)), float(np.std(per_seed, ddof=ddof))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("seed,episode,device,avg_aoi,gamma,drop_rate\n")
        for r in self.rows:
            out.write(
                f"{r.seed},{r.episode},{r.device},{r.avg_aoi!r},{r.gamma!r},{r.drop_rate!r}\n"
            )
        return out.getvalue()

    def aggregate_csv(self) -> str:
        out = io.StringIO()
        out.write("episode,avg_aoi_mean,avg_aoi_std\n")
        for ep, mean, std in self.aggregate():
            out.write(f"{ep},{mean!r},{std!r}\n")
        return out.getvalue()


def _episode_metrics(log, spec: ExperimentSpec, gammas, seed: int, episode: int,
                     ledgers) -> list[ResultRow]:
    rows = []
    for device in range(spec.sim.num_devices):
        summary = average_aoi(log, device)
        drops = log.drop_count(device)
        total = len(log.device_tasks(device))
        for rec in device_records(log, device):
            ledgers[device].add_record(*rec)
        rows.append(
            ResultRow(
                seed=seed, episode=episode, device=device,
                avg_aoi=summary.time_average, gamma=gammas[device],
                drop_rate=drops / total if total else 0.0,
            )
        )
    return rows


def run_experiment(spec: ExperimentSpec) -> ResultsTable:
    """Run every (seed, episode) cell and collect per-device metrics.

    The per-device quotient coefficient starts at ``gamma0`` and is
    refreshed from the accumulated ledger every ``gamma_update_period``
    episodes (matching the coarse update cadence used for learning runs).
    Deterministic: equal specs produce byte-identical CSV.
    """
    spec.validate()
    if spec.policy.startswith("bridge:"):
        return _run_bridge_experiment(spec)
    kind = BaselineKind.parse(spec.policy)
    table = ResultsTable(policy=kind.label())
    for seed in spec.seeds:
        gammas = [spec.gamma0] * spec.sim.num_devices
        ledgers = [
            CostLedger(device=m, episode=1, gamma=spec.gamma0)
            for m in range(spec.sim.num_devices)
        ]
        for episode in range(1, spec.episodes + 1):
            cfg = spec.episode_config(seed, episode)
            sim = Simulation(cfg)
            policies = [
                BaselinePolicy(kind, cfg.z_max, seed=(seed, episode, m))
                for m in range(cfg.num_devices)
            ]
            log = run_with_policies(sim, policies)
            table.rows.extend(
                _episode_metrics(log, spec, gammas, seed, episode, ledgers)
            )
            if episode % spec.gamma_update_period == 0:
                for m in range(cfg.num_devices):
                    upd = episode_gamma_update(ledgers[m])
                    gammas[m] = upd.gamma
                    ledgers[m] = CostLedger(device=m, episode=episode + 1, gamma=upd.gamma)
    return table


def _run_bridge_experiment(spec: ExperimentSpec) -> ResultsTable:
    """Serve the experiment's devices to an external client per seed."""
    try:
        _tag, host, port = spec.policy.split(":")
        port = int(port)
    except ValueError as exc:
        raise HarnessError(
            f"bridge policy must look like bridge:HOST:PORT, got {spec.policy!r}"
        ) from exc
    table = ResultsTable(policy=spec.policy)
    for seed in spec.seeds:
        server = BridgeServer(
            sim_factory=lambda ep, _seed=seed: Simulation(spec.episode_config(_seed, ep)),
            episodes=spec.episodes, steps=spec.steps,
            cost_mode=spec.cost_mode, gamma0=spec.gamma0,
        )
        try:
            logs = server.serve_tcp(host=host, port=port, timeout=60.0)
        except BridgeError as exc:
            raise HarnessError(f"bridge endpoint {host}:{port} unreachable: {exc}") from exc
        gammas = [spec.gamma0] * spec.sim.num_devices
        for episode, log in enumerate(logs, start=1):
            ledgers = [CostLedger(device=m, episode=episode) for m in range(spec.sim.num_devices)]
            table.rows.extend(
                _episode_metrics(log, spec, gammas, seed, episode, ledgers)
            )
            gammas = list(server.gamma_history[episode - 1])
    return table


def sweep(spec: ExperimentSpec, axis: str, values) -> str:
    """One run_experiment per axis value; returns the comparison CSV."""
    if axis not in SWEEP_AXES:
        raise HarnessError(f"unknown sweep axis {axis!r} (choose from {SWEEP_AXES})")
    values = list(values)
    if not values:
        raise HarnessError("sweep values list must not be empty")
    out = io.StringIO()
    out.write("axis,value,policy,mean_aoi,std_aoi\n")
    for value in values:
        if axis == "num_devices":
            sim = replace(spec.sim, num_devices=int(value))
        else:
            sim = replace(spec.sim, **{axis: float(value)})
        sub = replace(spec, sim=sim)
        table = run_experiment(sub)
        mean, std = table.overall_mean_std()
        out.write(f"{axis},{value!r},{table.policy},{mean!r},{std!r}\n")
    return out.getvalue()


@dataclass
class ConvergenceReport:
    """Linear-rate diagnostics of a quotient-iteration trace."""

    ratios: list[float]
    fitted_rate: float | None
    monotone: bool
    in_unit_interval: bool | None
    tail_mean: float | None
    passed: bool
    notes: str = ""

    def to_text(self) -> str:
        lines = [
            f"ratios: {len(self.ratios)} admissible",
            f"monotone: {self.monotone}",
            f"in (0,1): {self.in_unit_interval}",
            f"fitted rate: {self.fitted_rate if self.fitted_rate is not None else 'n/a'}",
            f"tail mean: {self.tail_mean if self.tail_mean is not None else 'n/a'}",
            f"verdict: {'pass' if self.passed else 'FAIL'}",
        ]
        if self.notes:
            lines.append(f"notes: {self.notes}")
        return "\n".join(lines)


def convergence_report(
    trace: FqlTrace,
    gamma_star: float | None = None,
    alpha: float | None = None,
    controlled: bool = False,
    tail_tol: float = 0.05,
) -> ConvergenceReport:
    """Check a trace against the linear-convergence statement.

    Without gamma_star only monotonicity is checked.  With it, every
    admissible ratio must lie in (0,1); in controlled mode the tail-mean
    ratio must additionally sit within ``tail_tol`` of alpha.
    """
    seq = trace.gammas()
    monotone = all(a >= b - 1e-12 for a, b in zip(seq, seq[1:]))
    if gamma_star is None:
        return ConvergenceReport(
            ratios=[], fitted_rate=None, monotone=monotone,
            in_unit_interval=None, tail_mean=None, passed=monotone,
            notes="gamma* unknown: monotonicity check only",
        )
    ratios = rate_diagnostics(trace, gamma_star)
    in_unit = bool(ratios) and all(0.0 < r < 1.0 for r in ratios)
    tail = ratios[-max(3, len(ratios) // 3):] if ratios else []
    tail_mean = float(np.mean(tail)) if tail else None
    fitted = None
    gaps = [abs(g - gamma_star) for g in seq if abs(g - gamma_star) > 1e-12]
    if len(gaps) >= 3:
        xs = np.arange(len(gaps))
        slope = np.polyfit(xs, np.log(gaps), 1)[0]
        fitted = float(math.exp(slope))
    passed = in_unit
    notes = ""
    if controlled:
        if alpha is None:
            raise HarnessError("controlled mode needs alpha")
        ok = tail_mean is not None and abs(tail_mean - alpha) <= tail_tol + 1e-12
        passed = passed and ok
        if not ok:
            notes = f"tail mean {tail_mean} outside {alpha} +- {tail_tol}"
    return ConvergenceReport(
        ratios=ratios, fitted_rate=fitted, monotone=monotone,
        in_unit_interval=in_unit, tail_mean=tail_mean, passed=passed, notes=notes,
    )


# --- experiment spec files ----------------------------------------------------
#
# Same "key = value" format as simulator configs; the harness-level keys are
# policy, episodes, steps, gamma_update_period, seeds (comma-separated),
# cost_mode, gamma0.  All other keys go to the simulator config.

_SPEC_KEYS = {
    "policy": str,
    "episodes": int,
    "steps": int,
    "gamma_update_period": int,
    "cost_mode": str,
    "gamma0": float,
}


def spec_from_text(text: str) -> ExperimentSpec:
    spec_kwargs = {}
    sim_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key = line.partition("=")[0].strip()
        value = line.partition("=")[2].strip()
        if key in _SPEC_KEYS:
            try:
                spec_kwargs[key] = _SPEC_KEYS[key](value)
            except ValueError as exc:
                raise HarnessError(f"line {lineno}: bad {key}: {exc}") from exc
        elif key == "seeds":
            try:
                spec_kwargs["seeds"] = [int(v) for v in value.split(",") if v.strip()]
            except ValueError as exc:
                raise HarnessError(f"line {lineno}: bad seeds: {exc}") from exc
        else:
            sim_lines.append(raw)
    try:
        sim = config_from_text("\n".join(sim_lines))
    except ConfigError as exc:
        raise HarnessError(str(exc)) from exc
    spec = ExperimentSpec(sim=sim, **spec_kwargs)
    spec.validate()
    return spec


def spec_to_text(spec: ExperimentSpec) -> str:
    from .sim import config_to_text

    out = io.StringIO()
    out.write(f"policy = {spec.policy}\n")
    out.write(f"episodes = {spec.episodes}\n")
    out.write(f"steps = {spec.steps}\n")
    out.write(f"gamma_update_period = {spec.gamma_update_period}\n")
    out.write(f"seeds = {','.join(str(s) for s in spec.seeds)}\n")
    out.write(f"cost_mode = {spec.cost_mode}\n")
    out.write(f"gamma0 = {spec.gamma0!r}\n")
    out.write(config_to_text(spec.sim))
    return out.getvalue()
