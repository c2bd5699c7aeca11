"""Continuous-time discrete-event simulator for multi-device edge offloading.

Devices follow a generate-at-will cycle: after a task resolves (completes or
is dropped) the device picks a waiting time, generates the next task after
that wait, observes edge queue lengths, and routes the task either to its own
processor or to one of N FIFO edge nodes over a sampled wireless transmission.
A task that is still unfinished ``y_bar`` seconds after generation is dropped:
while waiting in an edge queue it is removed, while being served it runs to
completion (edges never preempt) but the output is discarded.

The simulator is driven through decision points: :meth:`Simulation.next_decision`
advances the event loop until some device needs an action and returns it;
``apply_update_action`` / ``apply_offload_action`` answer it.  Simulated time
never advances while a decision is unanswered, which makes closed-loop runs
reproducible: equal seeds produce byte-identical event traces.

Randomness is split into one substream per device (local processing and
transmission draws) and one per edge (service draws), so enlarging the system
does not perturb existing streams.
"""
from __future__ import annotations

import hashlib
import heapq
import io
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SimError",
    "ConfigError",
    "ProtocolError",
    "SimConfig",
    "TaskRecord",
    "DecisionPoint",
    "EpisodeEnd",
    "EpisodeLog",
    "Simulation",
    "build",
    "run_with_policies",
    "config_to_text",
    "config_from_text",
    "table1_defaults",
]


class SimError(Exception):
    """Base error for the simulator."""


class ConfigError(SimError):
    """Invalid configuration; message names the offending field."""


class ProtocolError(SimError):
    """An action arrived out of turn or outside its action space."""


EXPONENTIAL = "exponential"
LOGNORMAL = "lognormal"


@dataclass
class SimConfig:
    """Environment parameters.

    Capacities are in cycles/s, task_size in bits, task_density in
    cycles/bit, durations in seconds.  ``edge_capacity`` accepts one value
    for all edges or a per-edge list.  ``drop_coefficient`` scales the mean
    local processing time into the drop deadline y_bar; math.inf disables
    drops.  The horizon is a per-device resolved-task budget
    (``horizon_tasks``), a simulated-time limit (``horizon_time``), or both.
    """

    num_devices: int = 20
    num_edges: int = 2
    device_capacity: float = 2.5e9
    edge_capacity: float | list[float] = 41.8e9
    task_size: float = 30e6
    task_density: float = 297.0
    transmission_mean: float = 0.05
    drop_coefficient: float = 1.5
    z_max: float = 5.0
    service_distribution: str = EXPONENTIAL
    lognormal_sigma: float = 1.0
    horizon_tasks: int | None = 1000
    horizon_time: float | None = None
    seed: int = 0
    record_trace: str = "hash"  # "hash" | "full" | "off"

    def validate(self) -> None:
        if self.num_devices < 1:
            raise ConfigError("num_devices must be >= 1")
        if self.num_edges < 1:
            raise ConfigError("num_edges must be >= 1")
        for name in ("device_capacity", "task_size", "task_density", "transmission_mean"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for idx, cap in enumerate(self.edge_capacities()):
            if cap <= 0:
                raise ConfigError(f"edge_capacity[{idx}] must be positive")
        if len(self.edge_capacities()) != self.num_edges:
            raise ConfigError("edge_capacity list length must equal num_edges")
        if self.drop_coefficient <= 0:
            raise ConfigError("drop_coefficient must be positive")
        if self.z_max <= 0:
            raise ConfigError("z_max must be positive")
        if self.service_distribution not in (EXPONENTIAL, LOGNORMAL):
            raise ConfigError(f"service_distribution {self.service_distribution!r} unknown")
        if self.service_distribution == LOGNORMAL and self.lognormal_sigma <= 0:
            raise ConfigError("lognormal_sigma must be positive")
        if self.horizon_tasks is None and self.horizon_time is None:
            raise ConfigError("one of horizon_tasks / horizon_time is required")
        if self.horizon_tasks is not None and self.horizon_tasks < 1:
            raise ConfigError("horizon_tasks must be >= 1")
        if self.horizon_time is not None and self.horizon_time <= 0:
            raise ConfigError("horizon_time must be positive")
        if self.record_trace not in ("hash", "full", "off"):
            raise ConfigError("record_trace must be one of hash/full/off")

    def edge_capacities(self) -> list[float]:
        cap = self.edge_capacity
        if isinstance(cap, (int, float)):
            return [float(cap)] * self.num_edges
        return [float(c) for c in cap]

    @property
    def task_work(self) -> float:
        """Cycles needed by one task."""
        return self.task_size * self.task_density

    @property
    def local_mean(self) -> float:
        return self.task_work / self.device_capacity

    def edge_mean(self, edge: int) -> float:
        return self.task_work / self.edge_capacities()[edge]

    @property
    def y_bar(self) -> float:
        """Drop deadline: drop_coefficient times the mean local processing time."""
        return self.drop_coefficient * self.local_mean


def table1_defaults(**overrides) -> SimConfig:
    """The 20-device / 2-edge default environment."""
    return SimConfig(**overrides)


@dataclass
class TaskRecord:
    """Lifecycle of one resolved task."""

    device: int
    k: int
    gen_time: float
    wait_before: float
    route: int
    tau_local: float | None
    tau_tran: float | None
    tau_edge: float | None
    edge_wait: float | None
    resolve_time: float
    delay: float | None      # None when dropped
    dropped: bool
    queue_obs: tuple[int, ...] = ()   # edge backlogs observed at generation


@dataclass(frozen=True)
class DecisionPoint:
    """An observation awaiting an action from one device."""

    device: int
    kind: str                     # "updating" | "offloading"
    sim_time: float
    updating_state: float | None = None
    offloading_state: tuple[int, ...] | None = None
    token: int = -1


class EpisodeEnd:
    """Sentinel returned once every device has exhausted its horizon."""

    def __repr__(self):  # pragma: no cover - cosmetic
        return "EpisodeEnd()"


_CSV_COLUMNS = (
    "device,k,gen_time,wait,route,tau_local,tau_tran,tau_edge,"
    "edge_wait,resolve_time,delay,dropped"
)


@dataclass
class EpisodeLog:
    """All resolved tasks plus the event trace of one closed-loop run."""

    config: SimConfig
    tasks: list[TaskRecord] = field(default_factory=list)
    end_time: float = 0.0
    clamp_warnings: int = 0
    trace_digest: str = ""
    trace_lines: list[str] | None = None

    def device_tasks(self, device: int) -> list[TaskRecord]:
        return sorted((t for t in self.tasks if t.device == device), key=lambda t: t.k)

    def drop_count(self, device: int | None = None) -> int:
        return sum(
            1 for t in self.tasks if t.dropped and (device is None or t.device == device)
        )

    def to_csv(self) -> str:
        def cell(x):
            if x is None:
                return ""
            if isinstance(x, float):
                return repr(x)
            return str(x)

        out = io.StringIO()
        out.write(_CSV_COLUMNS + "\n")
        for t in self.tasks:
            out.write(
                ",".join(
                    cell(v)
                    for v in (
                        t.device, t.k, t.gen_time, t.wait_before, t.route,
                        t.tau_local, t.tau_tran, t.tau_edge, t.edge_wait,
                        t.resolve_time, t.delay, int(t.dropped),
                    )
                )
                + "\n"
            )
        return out.getvalue()


class _Task:
    __slots__ = (
        "device", "k", "gen_time", "wait_before", "route", "tau_local",
        "tau_tran", "tau_edge", "edge_wait", "arrival_time", "resolved",
        "discarded", "queue_obs",
    )

    def __init__(self, device: int, k: int, gen_time: float, wait_before: float):
        self.device = device
        self.k = k
        self.gen_time = gen_time
        self.wait_before = wait_before
        self.route = -1
        self.tau_local = None
        self.tau_tran = None
        self.tau_edge = None
        self.edge_wait = None
        self.arrival_time = None
        self.resolved = False
        self.discarded = False
        self.queue_obs = ()


class _Device:
    __slots__ = ("id", "rng", "task", "resolved_count", "done", "next_k")

    def __init__(self, dev_id: int, rng: np.random.Generator):
        self.id = dev_id
        self.rng = rng
        self.task: _Task | None = None
        self.resolved_count = 0
        self.done = False
        self.next_k = 1


class _Edge:
    __slots__ = ("id", "rng", "mean", "waiting", "serving", "serving_done")

    def __init__(self, edge_id: int, rng: np.random.Generator, mean: float):
        self.id = edge_id
        self.rng = rng
        self.mean = mean
        self.waiting: deque[_Task] = deque()
        self.serving: _Task | None = None
        self.serving_done = math.inf

    def backlog(self) -> int:
        return len(self.waiting) + (1 if self.serving is not None else 0)


# event codes (heap entries are (time, seq, code, payload))
_EV_GEN = 0
_EV_ARRIVE = 1
_EV_SVC_DONE = 2
_EV_LOCAL_DONE = 3
_EV_DROP = 4


class Simulation:
    """Event-driven state machine; see the module docstring for the model."""

    def __init__(self, config: SimConfig, duration_hook=None):
        config.validate()
        self.config = config
        self.clock = 0.0
        self._hook = duration_hook
        self._events: list = []
        self._seq = 0
        self._ready: deque[DecisionPoint] = deque()
        self._pending: DecisionPoint | None = None
        self._token = 0
        self._ended = False
        self.log = EpisodeLog(config=config)
        seed = config.seed
        self.devices = [
            _Device(m, np.random.default_rng(np.random.SeedSequence([seed, 0, m])))
            for m in range(config.num_devices)
        ]
        self.edges = [
            _Edge(n, np.random.default_rng(np.random.SeedSequence([seed, 1, n])),
                  config.edge_mean(n))
            for n in range(config.num_edges)
        ]
        self.y_bar = config.y_bar
        self._initial_state = min(config.local_mean, self.y_bar)
        self._hasher = hashlib.sha256() if config.record_trace != "off" else None
        if config.record_trace == "full":
            self.log.trace_lines = []
        for dev in self.devices:
            self._issue_updating(dev, 0.0, self._initial_state)

    # -- randomness ---------------------------------------------------------

    def _draw(self, rng: np.random.Generator, mean: float, kind: str,
              device: int, edge: int, k: int) -> float:
        if self._hook is not None:
            forced = self._hook(kind, device, edge, k)
            if forced is not None:
                return float(forced)
        if self.config.service_distribution == EXPONENTIAL:
            return float(rng.exponential(mean))
        sigma = self.config.lognormal_sigma
        mu = math.log(mean) - 0.5 * sigma * sigma  # mean-matched lognormal
        return float(rng.lognormal(mu, sigma))

    # -- trace --------------------------------------------------------------

    def _trace(self, line: str) -> None:
        if self._hasher is not None:
            self._hasher.update(line.encode())
            self._hasher.update(b"\n")
            if self.log.trace_lines is not None:
                self.log.trace_lines.append(line)

    def trace_digest(self) -> str:
        if self._hasher is None:
            return ""
        return self._hasher.hexdigest()

    # -- event plumbing ------------------------------------------------------

    def _push(self, time: float, code: int, payload) -> None:
        self._seq += 1
        heapq.heappush(self._events, (time, self._seq, code, payload))

    def _issue_updating(self, dev: _Device, t: float, state: float) -> None:
        self._token += 1
        dp = DecisionPoint(
            device=dev.id, kind="updating", sim_time=t,
            updating_state=state, token=self._token,
        )
        self._ready.append(dp)
        self._trace(f"DU {t!r} {dev.id} {state!r}")

    def _issue_offloading(self, dev: _Device, t: float) -> None:
        self._token += 1
        q = tuple(e.backlog() for e in self.edges)
        dev.task.queue_obs = q
        dp = DecisionPoint(
            device=dev.id, kind="offloading", sim_time=t,
            offloading_state=q, token=self._token,
        )
        self._ready.append(dp)
        self._trace(f"DO {t!r} {dev.id} {','.join(map(str, q))}")

    # -- public stepping -----------------------------------------------------

    def next_decision(self):
        """Advance to the next required action, or EpisodeEnd."""
        if self._ended:
            raise ProtocolError("next_decision called after EpisodeEnd")
        if self._pending is not None:
            raise ProtocolError(
                f"device {self._pending.device} has an unanswered decision"
            )
        while True:
            if self._ready:
                self._pending = self._ready.popleft()
                return self._pending
            if not self._events:
                self._ended = True
                self.log.end_time = self.clock
                self.log.trace_digest = self.trace_digest()
                return EpisodeEnd()
            time, _seq, code, payload = heapq.heappop(self._events)
            assert time >= self.clock - 1e-12
            self.clock = time
            if code == _EV_GEN:
                self._on_generate(payload)
            elif code == _EV_ARRIVE:
                self._on_arrive(*payload)
            elif code == _EV_SVC_DONE:
                self._on_service_done(payload)
            elif code == _EV_LOCAL_DONE:
                self._on_local_done(payload)
            elif code == _EV_DROP:
                self._on_drop(payload)

    def apply_update_action(self, device: int, z: float) -> None:
        dp = self._expect(device, "updating")
        try:
            z = float(z)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"device {device}: malformed waiting time {z!r}") from exc
        if not math.isfinite(z):
            raise ProtocolError(f"device {device}: waiting time must be finite")
        clamped = min(max(z, 0.0), self.config.z_max)
        if clamped != z:
            self.log.clamp_warnings += 1
        dev = self.devices[device]
        gen_time = dp.sim_time + clamped
        task = _Task(device, dev.next_k, gen_time, clamped)
        dev.next_k += 1
        dev.task = task
        self._push(gen_time, _EV_GEN, task)
        self._trace(f"AU {dp.sim_time!r} {device} {clamped!r}")

    def apply_offload_action(self, device: int, x: int) -> None:
        dp = self._expect(device, "offloading")
        if not isinstance(x, (int, np.integer)) or isinstance(x, bool):
            raise ProtocolError(f"device {device}: route must be an integer, got {x!r}")
        x = int(x)
        if not (0 <= x <= self.config.num_edges):
            raise ProtocolError(
                f"device {device}: route {x} outside 0..{self.config.num_edges}"
            )
        dev = self.devices[device]
        task = dev.task
        task.route = x
        t = dp.sim_time
        self._trace(f"AO {t!r} {device} {x}")
        if x == 0:
            tau = self._draw(dev.rng, self.config.local_mean, "local", device, -1, task.k)
            task.tau_local = tau
            if tau <= self.y_bar:
                self._push(t + tau, _EV_LOCAL_DONE, task)
            else:
                self._push(t + self.y_bar, _EV_DROP, task)
        else:
            tau = self._draw(dev.rng, self.config.transmission_mean, "tran", device, x - 1, task.k)
            task.tau_tran = tau
            self._push(t + tau, _EV_ARRIVE, (task, x - 1))
            if self.y_bar < math.inf:
                self._push(t + self.y_bar, _EV_DROP, task)

    def _expect(self, device: int, kind: str) -> DecisionPoint:
        dp = self._pending
        if dp is None or dp.device != device or dp.kind != kind:
            have = "none" if dp is None else f"{dp.kind} for device {dp.device}"
            raise ProtocolError(
                f"out-of-turn {kind} action from device {device} (pending: {have})"
            )
        self._pending = None
        return dp

    # -- event handlers ------------------------------------------------------

    def _on_generate(self, task: _Task) -> None:
        self._trace(f"G {self.clock!r} {task.device} {task.k}")
        self._issue_offloading(self.devices[task.device], self.clock)

    def _on_arrive(self, task: _Task, edge_id: int) -> None:
        if task.resolved:
            return  # dropped during transmission
        edge = self.edges[edge_id]
        task.arrival_time = self.clock
        self._trace(f"R {self.clock!r} {task.device} {task.k} {edge_id}")
        if edge.serving is None:
            self._start_service(edge, task)
        else:
            edge.waiting.append(task)

    def _start_service(self, edge: _Edge, task: _Task) -> None:
        tau = self._draw(edge.rng, edge.mean, "edge", task.device, edge.id, task.k)
        task.tau_edge = tau
        task.edge_wait = self.clock - task.arrival_time
        edge.serving = task
        edge.serving_done = self.clock + tau
        self._push(edge.serving_done, _EV_SVC_DONE, edge.id)
        self._trace(f"S {self.clock!r} {edge.id} {task.device} {task.k}")

    def _on_service_done(self, edge_id: int) -> None:
        edge = self.edges[edge_id]
        task = edge.serving
        edge.serving = None
        edge.serving_done = math.inf
        if task is not None and not task.resolved:
            self._resolve(task, completed=True)
        # discarded tasks only free the server
        if edge.waiting:
            self._start_service(edge, edge.waiting.popleft())

    def _on_local_done(self, task: _Task) -> None:
        if not task.resolved:
            self._resolve(task, completed=True)

    def _on_drop(self, task: _Task) -> None:
        if task.resolved:
            return
        if task.route > 0:
            edge = self.edges[task.route - 1]
            if edge.serving is task:
                if edge.serving_done <= self.clock + 1e-15:
                    return  # completes exactly at the deadline
                task.discarded = True  # keeps the server busy, output unusable
            else:
                try:
                    edge.waiting.remove(task)
                except ValueError:
                    pass  # still in transmission; arrival will be ignored
        self._resolve(task, completed=False)

    def _resolve(self, task: _Task, completed: bool) -> None:
        task.resolved = True
        t = self.clock
        dev = self.devices[task.device]
        dev.task = None
        dev.resolved_count += 1
        delay = (t - task.gen_time) if completed else None
        if completed and delay > self.y_bar + 1e-9:  # pragma: no cover - guarded by drop events
            raise SimError("completed task exceeded the drop deadline")
        self.log.tasks.append(
            TaskRecord(
                device=task.device, k=task.k, gen_time=task.gen_time,
                wait_before=task.wait_before, route=task.route,
                tau_local=task.tau_local, tau_tran=task.tau_tran,
                tau_edge=task.tau_edge, edge_wait=task.edge_wait,
                resolve_time=t, delay=delay, dropped=not completed,
                queue_obs=task.queue_obs,
            )
        )
        self._trace(
            f"{'C' if completed else 'X'} {t!r} {task.device} {task.k}"
        )
        cfg = self.config
        if cfg.horizon_tasks is not None and dev.resolved_count >= cfg.horizon_tasks:
            dev.done = True
        if cfg.horizon_time is not None and t >= cfg.horizon_time:
            dev.done = True
        if not dev.done:
            state = delay if completed else self.y_bar
            self._issue_updating(dev, t, state)


def build(config: SimConfig, duration_hook=None) -> Simulation:
    """Validate the config and return a fresh simulation at t=0."""
    return Simulation(config, duration_hook=duration_hook)


def run_with_policies(sim: Simulation, policies, max_decisions: int | None = None) -> EpisodeLog:
    """Drive the simulation to its horizon with one policy per device.

    ``policies`` maps device index to a callable DecisionPoint -> action
    (a waiting time for updating decisions, a route index for offloading
    ones).  Malformed actions abort with the offending device and decision
    attached.
    """
    n_dev = sim.config.num_devices
    if len(policies) != n_dev:
        raise ConfigError(f"expected {n_dev} policies, got {len(policies)}")
    count = 0
    while True:
        dp = sim.next_decision()
        if isinstance(dp, EpisodeEnd):
            return sim.log
        count += 1
        if max_decisions is not None and count > max_decisions:
            raise SimError(f"decision budget {max_decisions} exhausted")
        action = policies[dp.device](dp)
        try:
            if dp.kind == "updating":
                sim.apply_update_action(dp.device, action)
            else:
                sim.apply_offload_action(dp.device, action)
        except ProtocolError as exc:
            raise SimError(
                f"policy for device {dp.device} returned a malformed action "
                f"at {dp}: {exc}"
            ) from exc


# ---------------------------------------------------------------------------
# Key-value config files: one "key = value" pair per line, '#' comments.
# edge_capacity accepts a comma-separated per-edge list.
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {
    "num_devices": int,
    "num_edges": int,
    "device_capacity": float,
    "task_size": float,
    "task_density": float,
    "transmission_mean": float,
    "drop_coefficient": float,
    "z_max": float,
    "service_distribution": str,
    "lognormal_sigma": float,
    "seed": int,
    "record_trace": str,
}


def config_to_text(config: SimConfig) -> str:
    out = io.StringIO()
    for name, conv in _CONFIG_FIELDS.items():
        val = getattr(config, name)
        out.write(f"{name} = {val!r}\n" if conv is float else f"{name} = {val}\n")
    caps = ",".join(repr(c) for c in config.edge_capacities())
    out.write(f"edge_capacity = {caps}\n")
    if config.horizon_tasks is not None:
        out.write(f"horizon_tasks = {config.horizon_tasks}\n")
    if config.horizon_time is not None:
        out.write(f"horizon_time = {config.horizon_time!r}\n")
    return out.getvalue()


def config_from_text(text: str) -> SimConfig:
    cfg = SimConfig()
    cfg.horizon_tasks = None
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key in _CONFIG_FIELDS:
                seen[key] = _CONFIG_FIELDS[key](value)
            elif key == "edge_capacity":
                parts = [float(p) for p in value.split(",") if p.strip()]
                seen[key] = parts[0] if len(parts) == 1 else parts
            elif key == "horizon_tasks":
                seen[key] = int(value)
            elif key == "horizon_time":
                seen[key] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    for key, val in seen.items():
        setattr(cfg, key, val)
    if cfg.horizon_tasks is None and cfg.horizon_time is None:
        cfg.horizon_tasks = 1000
    cfg.validate()
    return cfg
