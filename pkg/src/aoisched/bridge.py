"""Wire protocol between the simulator and external learning clients.

Messages are newline-delimited JSON objects (UTF-8, one object per line,
keys sorted) carried over a TCP socket or a stdio pipe.  Message types:
hello, decision, action, experience, gamma_update, episode_begin,
episode_end, error.  Every message carries ``device`` (-1 for session-scope
messages), ``episode`` and a per-sender monotonically increasing ``seq``.

The server runs the simulation in lockstep: it sends a ``decision``, waits
for the matching ``action`` (validated by token), and never advances
simulated time while a decision is unanswered.  Rejected inputs get an
``error`` reply and the session continues.

Costs are computed server-side from the logged delay/wait triples at the
device's current quotient coefficient (or as plain age-over-interval ratios
for non-fractional clients), so a client stays a pure function
approximator.  Each experience is emitted only once its closing completion
has resolved; at the end of every episode the server sends one
``gamma_update`` per device carrying the episode's realized
numerator/denominator quotient.

The full schema and a golden transcript live in docs/protocol.md.
"""
from __future__ import annotations

import json
import socket
from dataclasses import dataclass, fields
from typing import Callable

from .aoi import CostLedger, episode_gamma_update
from .sim import EpisodeEnd, EpisodeLog, ProtocolError, Simulation

__all__ = [
    "PROTOCOL_VERSION",
    "BridgeError",
    "DecodeError",
    "Hello",
    "EpisodeBegin",
    "EpisodeEndMsg",
    "Decision",
    "Action",
    "Experience",
    "GammaUpdate",
    "ErrorMsg",
    "encode",
    "decode",
    "BridgeServer",
    "BridgeClient",
    "connect_tcp",
    "experiences_from_log",
    "canonical_experiences",
]

PROTOCOL_VERSION = 1


class BridgeError(Exception):
    """Session-level protocol failure."""


class DecodeError(BridgeError):
    """Payload failed schema validation."""


# --- message types -----------------------------------------------------------
#
# Field types are enforced on decode; unknown fields are rejected.  ``state``
# and ``next_state`` are a float for updating decisions and a list of queue
# lengths for offloading ones; an action carries ``z`` (updating) or ``x``
# (offloading).

_NUMBER = (int, float)


@dataclass(frozen=True)
class _Message:
    device: int
    episode: int
    seq: int


@dataclass(frozen=True)
class Hello(_Message):
    """Handshake in either direction; ``role`` says which.

    A client hello carries ``name`` and may request the env-side
    ``cost_mode``.  The server's reply fills in the environment dimensions
    and the episode plan.
    """

    role: str = "client"
    protocol: int = PROTOCOL_VERSION
    name: str = ""
    cost_mode: str = "fractional"
    num_devices: int = 0
    num_edges: int = 0
    z_max: float = 0.0
    episodes: int = 0
    steps: int = 0
    gamma0: float = 0.0

    TYPE = "hello"


@dataclass(frozen=True)
class EpisodeBegin(_Message):
    TYPE = "episode_begin"


@dataclass(frozen=True)
class EpisodeEndMsg(_Message):
    final: bool = False

    TYPE = "episode_end"


@dataclass(frozen=True)
class Decision(_Message):
    kind: str = "updating"
    state: float | list = 0.0
    k: int = 0
    token: int = 0

    TYPE = "decision"


@dataclass(frozen=True)
class Action(_Message):
    token: int = 0
    z: float | None = None
    x: int | None = None

    TYPE = "action"


@dataclass(frozen=True)
class Experience(_Message):
    kind: str = "updating"
    state: float | list = 0.0
    action: float | int = 0
    cost: float = 0.0
    next_state: float | list = 0.0
    k: int = 0

    TYPE = "experience"


@dataclass(frozen=True)
class GammaUpdate(_Message):
    gamma: float = 0.0
    carried: bool = False

    TYPE = "gamma_update"


@dataclass(frozen=True)
class ErrorMsg(_Message):
    code: str = "protocol"
    detail: str = ""

    TYPE = "error"


_TYPES = {
    cls.TYPE: cls
    for cls in (
        Hello, EpisodeBegin, EpisodeEndMsg, Decision, Action,
        Experience, GammaUpdate, ErrorMsg,
    )
}

_INT_FIELDS = {
    "device", "episode", "seq", "k", "token", "protocol",
    "num_devices", "num_edges", "episodes", "steps",
}
_FLOAT_FIELDS = {"z_max", "gamma", "gamma0", "cost"}
_STR_FIELDS = {"name", "cost_mode", "code", "detail", "role"}
_BOOL_FIELDS = {"final", "carried"}
_STATE_FIELDS = {"state", "next_state"}


def _check_field(mtype: str, name: str, value):
    if name in _INT_FIELDS:
        if not isinstance(value, int) or isinstance(value, bool):
            raise DecodeError(f"{mtype}.{name} must be an integer")
    elif name in _FLOAT_FIELDS:
        if not isinstance(value, _NUMBER) or isinstance(value, bool):
            raise DecodeError(f"{mtype}.{name} must be a number")
        return float(value)
    elif name == "kind":
        if value not in ("updating", "offloading"):
            raise DecodeError(f"{mtype}.kind must be updating/offloading")
    elif name in _STATE_FIELDS:
        if isinstance(value, list):
            if not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise DecodeError(f"{mtype}.{name} queue entries must be integers")
        else:
            if not isinstance(value, _NUMBER) or isinstance(value, bool):
                raise DecodeError(f"{mtype}.{name} must be a number or a queue list")
            return float(value)
    elif name in _STR_FIELDS:
        if not isinstance(value, str):
            raise DecodeError(f"{mtype}.{name} must be a string")
    elif name in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise DecodeError(f"{mtype}.{name} must be a boolean")
    elif name == "z":
        if value is not None and (not isinstance(value, _NUMBER) or isinstance(value, bool)):
            raise DecodeError(f"{mtype}.z must be a number or null")
        return None if value is None else float(value)
    elif name == "x":
        if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
            raise DecodeError(f"{mtype}.x must be an integer or null")
    elif name == "action":
        # waiting times stay floats, routes stay ints: no coercion
        if not isinstance(value, _NUMBER) or isinstance(value, bool):
            raise DecodeError(f"{mtype}.action must be a number")
    return value


def encode(msg) -> bytes:
    """One message to one newline-terminated JSON line (keys sorted)."""
    cls = type(msg)
    if getattr(cls, "TYPE", None) not in _TYPES:
        raise BridgeError(f"not a protocol message: {msg!r}")
    payload = {"type": cls.TYPE}
    for f in fields(msg):
        value = getattr(msg, f.name)
        if isinstance(value, tuple):
            value = list(value)
        payload[f.name] = value
    return (json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n").encode()


def decode(data) -> _Message:
    """Parse and validate one line; raises DecodeError on any violation."""
    if isinstance(data, bytes):
        try:
            data = data.decode()
        except UnicodeDecodeError as exc:
            raise DecodeError(f"payload is not UTF-8: {exc}") from exc
    text = data.strip()
    if not text:
        raise DecodeError("empty payload")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DecodeError(f"truncated or malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError("payload must be a JSON object")
    mtype = obj.pop("type", None)
    cls = _TYPES.get(mtype)
    if cls is None:
        raise DecodeError(f"unknown message type {mtype!r}")
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise DecodeError(f"{mtype}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in obj:
            raise DecodeError(f"{mtype}: missing field {f.name!r}")
        kwargs[f.name] = _check_field(mtype, f.name, obj[f.name])
    return cls(**kwargs)


def _replace_seq(msg, seq: int):
    values = {f.name: getattr(msg, f.name) for f in fields(msg)}
    values["seq"] = seq
    return type(msg)(**values)


# --- per-device experience assembly ------------------------------------------


class _DeviceState:
    """Record chain of one device within one episode."""

    __slots__ = ("ledger", "prev_delay", "first_wait", "first_gen", "pending_offload")

    def __init__(self, device: int, episode: int, gamma: float):
        self.ledger = CostLedger(device=device, episode=episode, gamma=gamma)
        self.prev_delay: float | None = None
        self.first_wait: float | None = None
        self.first_gen: float | None = None
        self.pending_offload: dict | None = None


class _ExperienceBuilder:
    """Turns resolved tasks into delayed-cost experiences.

    Shared by the live server and the offline reconstruction used by the
    loopback tests.  Records use the drop-inflated convention: the waiting
    entry is the wait actually chosen at the first updating decision after
    the previous completion, and everything from that first attempt to the
    next completion is charged as the closing delay.
    """

    def __init__(self, num_devices: int, episode: int, gammas: list[float],
                 cost_mode: str = "fractional"):
        self.cost_mode = cost_mode
        self.episode = episode
        self.states = [_DeviceState(m, episode, gammas[m]) for m in range(num_devices)]

    def on_updating_action(self, device: int, wait: float, decision_time: float) -> None:
        st = self.states[device]
        if st.prev_delay is not None and st.first_wait is None:
            st.first_wait = wait
            st.first_gen = decision_time + wait

    def on_offloading_decision(self, device: int, queue_obs) -> list[Experience]:
        """Flush the device's pending offloading experience, if any."""
        st = self.states[device]
        if st.pending_offload is None:
            return []
        exp = Experience(
            device=device, episode=self.episode, seq=0,
            kind="offloading", next_state=list(queue_obs), **st.pending_offload,
        )
        st.pending_offload = None
        return [exp]

    def on_resolved(self, task) -> list[Experience]:
        """Observe one resolved TaskRecord, in resolution order."""
        st = self.states[task.device]
        if task.dropped:
            return []
        out = []
        if st.prev_delay is not None and st.first_wait is not None:
            y = st.prev_delay
            z = st.first_wait
            y_next = task.resolve_time - st.first_gen
            cost = st.ledger.record_cost(y, z, y_next, self.cost_mode)
            out.append(
                Experience(
                    device=task.device, episode=self.episode, seq=0,
                    kind="updating", state=y, action=z, cost=cost,
                    next_state=task.delay, k=task.k,
                )
            )
            st.pending_offload = {
                "state": list(task.queue_obs),
                "action": task.route,
                "cost": cost,
                "k": task.k,
            }
        st.prev_delay = task.delay
        st.first_wait = None
        st.first_gen = None
        return out

    def gamma_updates(self) -> list[GammaUpdate]:
        out = []
        for device, st in enumerate(self.states):
            upd = episode_gamma_update(st.ledger)
            out.append(
                GammaUpdate(
                    device=device, episode=self.episode, seq=0,
                    gamma=upd.gamma, carried=upd.carried,
                )
            )
        return out


# offline event codes: resolutions precede updating actions precede
# offloading decisions when timestamps tie (matching the live loop)
_EV_RESOLVE = 0
_EV_UPDATE_ACTION = 1
_EV_OFFLOAD_DECISION = 2


def experiences_from_log(
    log: EpisodeLog, episode: int, gammas: list[float], cost_mode: str = "fractional"
) -> tuple[list[Experience], list[GammaUpdate]]:
    """Reconstruct the experience stream a served episode would emit.

    Walks a finished episode log through the same builder the live server
    uses; loopback tests compare this with what a protocol client actually
    received over the wire.
    """
    builder = _ExperienceBuilder(log.config.num_devices, episode, gammas, cost_mode)
    events = []
    for m in range(log.config.num_devices):
        prev_resolve = 0.0  # first updating decision of an episode is at t=0
        for t in log.device_tasks(m):
            events.append((prev_resolve, _EV_UPDATE_ACTION, m, t))
            events.append((t.gen_time, _EV_OFFLOAD_DECISION, m, t))
            events.append((t.resolve_time, _EV_RESOLVE, m, t))
            prev_resolve = t.resolve_time
    events.sort(key=lambda e: (e[0], e[1], e[2], e[3].k))
    experiences: list[Experience] = []
    for time, code, m, t in events:
        if code == _EV_UPDATE_ACTION:
            builder.on_updating_action(m, t.wait_before, time)
        elif code == _EV_OFFLOAD_DECISION:
            experiences.extend(builder.on_offloading_decision(m, t.queue_obs))
        else:
            experiences.extend(builder.on_resolved(t))
    return experiences, builder.gamma_updates()


def canonical_experiences(experiences) -> list[tuple]:
    """Order-stable, seq-free projection for exact comparison."""
    rows = []
    for e in experiences:
        state = tuple(e.state) if isinstance(e.state, (list, tuple)) else e.state
        nxt = tuple(e.next_state) if isinstance(e.next_state, (list, tuple)) else e.next_state
        rows.append((e.episode, e.device, e.k, e.kind, state, e.action, e.cost, nxt))
    return sorted(rows)


# --- server ------------------------------------------------------------------


class BridgeServer:
    """Serves one multiplexed client session over a line-based transport.

    ``sim_factory(episode)`` must return a fresh Simulation per 1-based
    episode index.  The per-device quotient coefficient starts at ``gamma0``
    and follows the episode updates across the session.
    """

    def __init__(
        self,
        sim_factory: Callable[[int], Simulation],
        episodes: int,
        steps: int,
        cost_mode: str = "fractional",
        gamma0: float = 0.0,
    ):
        if cost_mode not in ("fractional", "ratio"):
            raise BridgeError(f"unknown cost mode {cost_mode!r}")
        if episodes < 1 or steps < 1:
            raise BridgeError("episodes and steps must be positive")
        self.sim_factory = sim_factory
        self.episodes = episodes
        self.steps = steps
        self.cost_mode = cost_mode
        self.gamma0 = gamma0
        self.logs: list[EpisodeLog] = []
        self.gamma_history: list[list[float]] = []
        self._seq = 0

    def run_session(self, reader, writer) -> list[EpisodeLog]:
        """Transport-agnostic core; reader/writer are binary file-likes."""
        self._seq = 0
        line = reader.readline()
        if not line:
            raise BridgeError("client closed before hello")
        hello = decode(line)
        if not isinstance(hello, Hello) or hello.role != "client":
            raise BridgeError("expected client hello")
        if hello.protocol != PROTOCOL_VERSION:
            raise BridgeError(f"protocol {hello.protocol} unsupported")
        cost_mode = hello.cost_mode if hello.cost_mode in ("fractional", "ratio") else self.cost_mode
        sim = self.sim_factory(1)
        cfg = sim.config
        self._send(writer, Hello(
            device=-1, episode=0, seq=0, role="server",
            num_devices=cfg.num_devices, num_edges=cfg.num_edges,
            z_max=cfg.z_max, episodes=self.episodes, steps=self.steps,
            cost_mode=cost_mode, gamma0=self.gamma0,
        ))
        gammas = [self.gamma0] * cfg.num_devices
        for episode in range(1, self.episodes + 1):
            if episode > 1:
                sim = self.sim_factory(episode)
            self._send(writer, EpisodeBegin(device=-1, episode=episode, seq=0))
            builder = _ExperienceBuilder(cfg.num_devices, episode, gammas, cost_mode)
            gen_counts = [0] * cfg.num_devices
            consumed = 0
            while True:
                dp = sim.next_decision()
                for task in sim.log.tasks[consumed:]:
                    for exp in builder.on_resolved(task):
                        self._send(writer, exp)
                consumed = len(sim.log.tasks)
                if isinstance(dp, EpisodeEnd):
                    break
                if dp.kind == "updating":
                    k = gen_counts[dp.device] + 1
                    state = dp.updating_state
                else:
                    gen_counts[dp.device] += 1
                    k = gen_counts[dp.device]
                    state = list(dp.offloading_state)
                    for exp in builder.on_offloading_decision(dp.device, dp.offloading_state):
                        self._send(writer, exp)
                self._send(writer, Decision(
                    device=dp.device, episode=episode, seq=0,
                    kind=dp.kind, state=state, k=k, token=dp.token,
                ))
                action = self._await_action(reader, writer, dp, episode)
                if dp.kind == "updating":
                    sim.apply_update_action(dp.device, action.z)
                    clamped = min(max(action.z, 0.0), cfg.z_max)
                    builder.on_updating_action(dp.device, clamped, dp.sim_time)
                else:
                    self._apply_route(reader, writer, sim, dp, action, episode)
            self.logs.append(sim.log)
            for upd in builder.gamma_updates():
                gammas[upd.device] = upd.gamma
                self._send(writer, upd)
            self.gamma_history.append(list(gammas))
            self._send(writer, EpisodeEndMsg(
                device=-1, episode=episode, seq=0, final=episode == self.episodes,
            ))
        return self.logs

    def _apply_route(self, reader, writer, sim, dp, action, episode) -> None:
        while True:
            try:
                sim.apply_offload_action(dp.device, action.x)
                return
            except ProtocolError as exc:
                self._send(writer, ErrorMsg(
                    device=dp.device, episode=episode, seq=0,
                    code="protocol", detail=str(exc),
                ))
                action = self._await_action(reader, writer, dp, episode)

    def _await_action(self, reader, writer, dp, episode) -> Action:
        def reject(code: str, detail: str) -> None:
            self._send(writer, ErrorMsg(
                device=dp.device, episode=episode, seq=0, code=code, detail=detail,
            ))

        while True:
            line = reader.readline()
            if not line:
                raise BridgeError("client closed mid-session")
            try:
                msg = decode(line)
            except DecodeError as exc:
                reject("bad_message", str(exc))
                continue
            if not isinstance(msg, Action):
                reject("protocol", f"expected action, got {msg.TYPE}")
                continue
            if msg.token != dp.token or msg.device != dp.device:
                reject("stale_token", f"token {msg.token} is not the pending decision")
                continue
            needed = "z" if dp.kind == "updating" else "x"
            if getattr(msg, needed) is None:
                reject("protocol", f"{dp.kind} action needs field {needed!r}")
                continue
            return msg

    def _send(self, writer, msg) -> None:
        self._seq += 1
        writer.write(encode(_replace_seq(msg, self._seq)))
        writer.flush()

    # -- transports -----------------------------------------------------------

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0,
                  ready_callback=None, timeout: float | None = None) -> list[EpisodeLog]:
        """Bind, accept one client, run the session, return per-episode logs."""
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as srv:
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                srv.bind((host, port))
            except OSError as exc:
                raise BridgeError(f"cannot bind {host}:{port}: {exc}") from exc
            srv.listen(1)
            if timeout is not None:
                srv.settimeout(timeout)
            if ready_callback is not None:
                ready_callback(srv.getsockname())
            try:
                conn, _addr = srv.accept()
            except socket.timeout as exc:
                raise BridgeError("no client connected before the timeout") from exc
            with conn:
                reader = conn.makefile("rb")
                writer = conn.makefile("wb")
                return self.run_session(reader, writer)

    def serve_stdio(self) -> list[EpisodeLog]:
        import sys

        return self.run_session(sys.stdin.buffer, sys.stdout.buffer)


# --- client ------------------------------------------------------------------


class BridgeClient:
    """Reference protocol client: answers decisions with a supplied policy.

    The policy callable receives each Decision and returns a waiting time
    (updating) or a route index (offloading).  Experiences, gamma updates
    and error replies are collected; server sequence numbers are validated.
    """

    def __init__(self, reader, writer, name: str = "client",
                 cost_mode: str = "fractional"):
        self.reader = reader
        self.writer = writer
        self.name = name
        self.cost_mode = cost_mode
        self._seq = 0
        self.server_hello: Hello | None = None
        self.experiences: list[Experience] = []
        self.gamma_updates: list[GammaUpdate] = []
        self.errors: list[ErrorMsg] = []

    def _send(self, msg) -> None:
        self._seq += 1
        self.writer.write(encode(_replace_seq(msg, self._seq)))
        self.writer.flush()

    def handshake(self) -> Hello:
        self._send(Hello(device=-1, episode=0, seq=0, role="client",
                         name=self.name, cost_mode=self.cost_mode))
        msg = decode(self.reader.readline())
        if not isinstance(msg, Hello) or msg.role != "server":
            raise BridgeError("expected server hello")
        self.server_hello = msg
        return msg

    def run(self, policy: Callable[[Decision], float | int]) -> None:
        """Answer decisions until the final episode_end arrives."""
        if self.server_hello is None:
            self.handshake()
        last_seq = self.server_hello.seq
        while True:
            line = self.reader.readline()
            if not line:
                raise BridgeError("server closed the connection")
            msg = decode(line)
            if msg.seq <= last_seq:
                raise BridgeError("server sequence numbers regressed")
            last_seq = msg.seq
            if isinstance(msg, Decision):
                value = policy(msg)
                if msg.kind == "updating":
                    act = Action(device=msg.device, episode=msg.episode, seq=0,
                                 token=msg.token, z=float(value))
                else:
                    act = Action(device=msg.device, episode=msg.episode, seq=0,
                                 token=msg.token, x=int(value))
                self._send(act)
            elif isinstance(msg, Experience):
                self.experiences.append(msg)
            elif isinstance(msg, GammaUpdate):
                self.gamma_updates.append(msg)
            elif isinstance(msg, ErrorMsg):
                self.errors.append(msg)
            elif isinstance(msg, EpisodeEndMsg):
                if msg.final:
                    return
            # hello / episode_begin need no reaction


def connect_tcp(host: str, port: int, timeout: float = 10.0):
    """Open a TCP connection; returns (reader, writer, socket)."""
    sock = socket.create_connection((host, port), timeout=timeout)
    return sock.makefile("rb"), sock.makefile("wb"), sock
