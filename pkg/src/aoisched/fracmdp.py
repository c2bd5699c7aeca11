"""Finite fractional MDPs and exact solvers for the optimal cost ratio.

A fractional MDP carries two nonnegative cost channels, a numerator c_N and a
strictly positive denominator c_D, on a common finite state/action space.  The
objective is the ratio of their discounted expectations from a designated
start state.  This module provides exact policy evaluation of that ratio,
value iteration for the scalarized cost c_N - gamma*c_D at a fixed quotient
coefficient gamma, a Dinkelbach iteration that drives gamma to the optimal
ratio, and a brute-force policy-enumeration oracle used as ground truth in
tests.

Instances serialize to a plain-text table format so solver fixtures can be
shared across tools; see :func:`dumps` / :func:`loads`.
"""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FracMdpError",
    "ValidationError",
    "SolverError",
    "FractionalMdp",
    "PolicyValue",
    "QTable",
    "evaluate_policy",
    "solve_given_gamma",
    "dinkelbach_exact",
    "enumerate_oracle",
    "greedy_action_sets",
    "reachable_states",
    "random_fractional_mdp",
    "dumps",
    "loads",
    "save",
    "load",
]

ROW_SUM_TOL = 1e-12


class FracMdpError(Exception):
    """Base error for this module."""


class ValidationError(FracMdpError):
    """An instance or argument violates a documented invariant."""


class SolverError(FracMdpError):
    """A solver failed to converge; carries the iterate trace."""

    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class FractionalMdp:
    """Finite MDP with numerator/denominator cost channels.

    transition has shape (S, A, S); cost_n and cost_d have shape (S, A).
    Rows of transition must be probability vectors, cost_d must be strictly
    positive, and the discount must lie strictly inside (0, 1).
    """

    transition: np.ndarray
    cost_n: np.ndarray
    cost_d: np.ndarray
    discount: float
    initial_state: int = 0

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        cn = np.asarray(self.cost_n, dtype=float)
        cd = np.asarray(self.cost_d, dtype=float)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "cost_n", cn)
        object.__setattr__(self, "cost_d", cd)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValidationError(f"transition must be (S, A, S), got {p.shape}")
        s, a = p.shape[0], p.shape[1]
        if cn.shape != (s, a) or cd.shape != (s, a):
            raise ValidationError("cost tables must have shape (S, A)")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > ROW_SUM_TOL):
            raise ValidationError("transition rows must sum to 1 within 1e-12")
        if np.any(cn < 0):
            raise ValidationError("cost_n must be nonnegative")
        if np.any(cd <= 0):
            raise ValidationError("cost_d must be strictly positive")
        if not (0.0 < self.discount < 1.0):
            raise ValidationError("discount must lie strictly inside (0, 1)")
        if not (0 <= self.initial_state < s):
            raise ValidationError("initial_state out of range")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def d_min(self) -> float:
        """Lower bound on the denominator cost; strictly positive."""
        return float(self.cost_d.min())

    def scaled(self, kappa_n: float = 1.0, kappa_d: float = 1.0) -> "FractionalMdp":
        """Same dynamics with cost channels scaled by positive factors."""
        if kappa_n <= 0 or kappa_d <= 0:
            raise ValidationError("scale factors must be positive")
        return FractionalMdp(
            self.transition, kappa_n * self.cost_n, kappa_d * self.cost_d,
            self.discount, self.initial_state,
        )


@dataclass(frozen=True)
class PolicyValue:
    """Discounted numerator/denominator sums of one policy from s0."""

    n_value: float
    d_value: float

    @property
    def ratio(self) -> float:
        return self.n_value / self.d_value


@dataclass(frozen=True)
class QTable:
    """Q/N/D tables solved at a fixed quotient coefficient gamma.

    q, n, d have shape (S, A) and satisfy q = n - gamma * d elementwise.
    """

    q: np.ndarray
    n: np.ndarray
    d: np.ndarray
    gamma: float

    def greedy(self) -> np.ndarray:
        """Minimizing action per state, ties to the lowest index."""
        return self.q.argmin(axis=1)


def _policy_matrices(mdp: FractionalMdp, policy: np.ndarray):
    idx = np.arange(mdp.num_states)
    p_pi = mdp.transition[idx, policy]          # (S, S)
    cn_pi = mdp.cost_n[idx, policy]
    cd_pi = mdp.cost_d[idx, policy]
    return p_pi, cn_pi, cd_pi


def _solve_linear(a: np.ndarray, b: np.ndarray, residual_tol: float = 1e-12) -> np.ndarray:
    """Solve a x = b with one step of iterative refinement if needed."""
    x = np.linalg.solve(a, b)
    r = b - a @ x
    scale = max(1.0, float(np.abs(b).max()))
    if np.abs(r).max() > residual_tol * scale:
        x = x + np.linalg.solve(a, r)
        r = b - a @ x
        if np.abs(r).max() > residual_tol * scale:
            raise SolverError("linear fixed-point residual above tolerance")
    return x


def _as_policy(mdp: FractionalMdp, policy) -> np.ndarray:
    pol = np.asarray(policy, dtype=int)
    if pol.shape != (mdp.num_states,):
        raise ValidationError("policy must map every state to an action")
    if np.any(pol < 0) or np.any(pol >= mdp.num_actions):
        raise ValidationError("policy action out of range")
    return pol


def evaluate_policy(mdp: FractionalMdp, policy, s0: int | None = None) -> PolicyValue:
    """Exact discounted numerator/denominator values of a deterministic policy.

    Solves the two linear fixed-point systems (I - delta*P_pi) v = c_pi to a
    1e-12 relative residual.  Sums start at step 0, so a single self-loop
    state accumulates c / (1 - delta).
    """
    pol = _as_policy(mdp, policy)
    s0 = mdp.initial_state if s0 is None else int(s0)
    if not (0 <= s0 < mdp.num_states):
        raise ValidationError("s0 out of range")
    p_pi, cn_pi, cd_pi = _policy_matrices(mdp, pol)
    a = np.eye(mdp.num_states) - mdp.discount * p_pi
    vn = _solve_linear(a, cn_pi)
    vd = _solve_linear(a, cd_pi)
    n, d = float(vn[s0]), float(vd[s0])
    if d < mdp.d_min / (1.0 - mdp.discount) - 1e-9:
        raise SolverError("denominator value below its analytic floor")
    return PolicyValue(n, d)


def solve_given_gamma(mdp: FractionalMdp, gamma: float, tol: float = 1e-10) -> QTable:
    """Value-iterate the scalarized cost c_N - gamma*c_D, then evaluate greedily.

    Iterates until the sup-norm Bellman residual drops below
    tol*(1-delta)/(2*delta), which bounds the greedy policy's value error by
    tol.  The returned q/n/d tables are exact policy-evaluation values of the
    greedy policy, so q = n - gamma*d holds to solver precision.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    delta = mdp.discount
    cost = mdp.cost_n - gamma * mdp.cost_d
    v = np.zeros(mdp.num_states)
    stop = tol * (1.0 - delta) / (2.0 * delta)
    # Residual of V_k equals ||V_{k+1} - V_k|| because V_{k+1} = T V_k.
    for _ in range(10_000_000):
        q = cost + delta * (mdp.transition @ v)
        v_next = q.min(axis=1)
        if np.abs(v_next - v).max() <= stop:
            v = v_next
            break
        v = v_next
    else:  # pragma: no cover - 10^7 sweeps is unreachable for delta < 1
        raise SolverError("value iteration failed to converge")
    greedy = q.argmin(axis=1)
    p_pi, cn_pi, cd_pi = _policy_matrices(mdp, greedy)
    a = np.eye(mdp.num_states) - delta * p_pi
    vn = _solve_linear(a, cn_pi)
    vd = _solve_linear(a, cd_pi)
    n_tab = mdp.cost_n + delta * (mdp.transition @ vn)
    d_tab = mdp.cost_d + delta * (mdp.transition @ vd)
    q_tab = n_tab - gamma * d_tab
    return QTable(q=q_tab, n=n_tab, d=d_tab, gamma=float(gamma))


def dinkelbach_exact(
    mdp: FractionalMdp,
    tol: float = 1e-9,
    max_iter: int = 100,
    inner_tol: float | None = None,
) -> tuple[float, np.ndarray]:
    """Exact Dinkelbach iteration for the optimal ratio gamma*.

    gamma_1 is the realized ratio of the all-first-action policy, which is
    an upper bound on gamma*, so the sequence approaches the root from above.
    Each step solves the scalarized MDP exactly and stops once the minimal
    Q-value at s0 is within tol of zero.
    """
    if tol <= 0:
        raise ValidationError("tol must be positive")
    inner_tol = tol * 1e-3 if inner_tol is None else inner_tol
    s0 = mdp.initial_state
    gamma = evaluate_policy(mdp, np.zeros(mdp.num_states, dtype=int)).ratio
    trace = []
    for _ in range(max_iter):
        tab = solve_given_gamma(mdp, gamma, inner_tol)
        a_i = int(tab.q[s0].argmin())
        f = float(tab.q[s0, a_i])
        trace.append((gamma, f))
        if abs(f) <= tol:
            return gamma, tab.greedy()
        gamma = float(tab.n[s0, a_i] / tab.d[s0, a_i])
    raise SolverError(
        f"Dinkelbach iteration did not converge in {max_iter} steps", trace
    )


def enumerate_oracle(
    mdp: FractionalMdp, max_policies: int = 1_000_000
) -> tuple[float, np.ndarray]:
    """Brute-force minimum of the ratio over all deterministic policies.

    Ties break toward the lexicographically smallest policy.  Rejects
    instances with more than ``max_policies`` deterministic policies.
    """
    count = mdp.num_actions ** mdp.num_states
    if count > max_policies:
        raise ValidationError(
            f"{count} policies exceed the enumeration cap of {max_policies}"
        )
    best_ratio = np.inf
    best_policy = None
    for actions in itertools.product(range(mdp.num_actions), repeat=mdp.num_states):
        pol = np.array(actions, dtype=int)
        ratio = evaluate_policy(mdp, pol).ratio
        if ratio < best_ratio:
            best_ratio = ratio
            best_policy = pol
    return float(best_ratio), best_policy


def greedy_action_sets(tab: QTable, tie_tol: float = 1e-7) -> list[set[int]]:
    """Per-state sets of actions within tie_tol of the minimal Q-value."""
    mins = tab.q.min(axis=1, keepdims=True)
    return [set(np.flatnonzero(row).tolist()) for row in (tab.q <= mins + tie_tol)]


def reachable_states(mdp: FractionalMdp, policy, s0: int | None = None) -> set[int]:
    """States reachable from s0 under the support of one policy."""
    pol = _as_policy(mdp, policy)
    s0 = mdp.initial_state if s0 is None else int(s0)
    seen = {s0}
    frontier = [s0]
    while frontier:
        s = frontier.pop()
        for nxt in np.flatnonzero(mdp.transition[s, pol[s]] > 0):
            if int(nxt) not in seen:
                seen.add(int(nxt))
                frontier.append(int(nxt))
    return seen


def random_fractional_mdp(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    discount: float = 0.9,
    sparsity: float = 0.0,
) -> FractionalMdp:
    """Dense random instance with c_N in (0, 1] and c_D in [0.2, 1]."""
    p = rng.random((num_states, num_actions, num_states)) + 1e-3
    if sparsity > 0:
        mask = rng.random(p.shape) < sparsity
        mask[..., 0] = False  # keep at least one successor
        p = np.where(mask, 0.0, p)
    p /= p.sum(axis=2, keepdims=True)
    cn = 1.0 - rng.random((num_states, num_actions))      # (0, 1]
    cd = 0.2 + 0.8 * rng.random((num_states, num_actions))  # [0.2, 1)
    return FractionalMdp(p, cn, cd, discount, initial_state=0)


# ---------------------------------------------------------------------------
# Plain-text serialization
#
# Format (whitespace-separated, '#' starts a comment line):
#   fractional-mdp v1
#   states S
#   actions A
#   discount DELTA
#   initial_state S0
#   P s a p(0) p(1) ... p(S-1)      one line per (s, a), s-major
#   CN s c(0) c(1) ... c(A-1)       one line per state
#   CD s c(0) c(1) ... c(A-1)       one line per state
# ---------------------------------------------------------------------------

_MAGIC = "fractional-mdp v1"


def dumps(mdp: FractionalMdp) -> str:
    out = io.StringIO()
    out.write(f"{_MAGIC}\n")
    out.write(f"states {mdp.num_states}\n")
    out.write(f"actions {mdp.num_actions}\n")
    out.write(f"discount {mdp.discount!r}\n")
    out.write(f"initial_state {mdp.initial_state}\n")
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            row = " ".join(repr(float(x)) for x in mdp.transition[s, a])
            out.write(f"P {s} {a} {row}\n")
    for name, table in (("CN", mdp.cost_n), ("CD", mdp.cost_d)):
        for s in range(mdp.num_states):
            row = " ".join(repr(float(x)) for x in table[s])
            out.write(f"{name} {s} {row}\n")
    return out.getvalue()


def loads(text: str) -> FractionalMdp:
    lines = [
        ln.strip() for ln in text.splitlines()
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines or lines[0] != _MAGIC:
        raise ValidationError(f"missing '{_MAGIC}' header")
    header: dict[str, str] = {}
    body_start = 1
    for ln in lines[1:]:
        key = ln.split(None, 1)[0]
        if key in ("P", "CN", "CD"):
            break
        k, v = ln.split(None, 1)
        header[k] = v
        body_start += 1
    try:
        s_count = int(header["states"])
        a_count = int(header["actions"])
        discount = float(header["discount"])
        s0 = int(header["initial_state"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"bad header: {exc}") from exc
    p = np.zeros((s_count, a_count, s_count))
    cn = np.full((s_count, a_count), np.nan)
    cd = np.full((s_count, a_count), np.nan)
    seen_p = np.zeros((s_count, a_count), dtype=bool)
    for ln in lines[body_start:]:
        parts = ln.split()
        tag = parts[0]
        try:
            if tag == "P":
                s, a = int(parts[1]), int(parts[2])
                vals = [float(x) for x in parts[3:]]
                if len(vals) != s_count:
                    raise ValidationError(f"P row for ({s},{a}) has {len(vals)} entries")
                p[s, a] = vals
                seen_p[s, a] = True
            elif tag in ("CN", "CD"):
                s = int(parts[1])
                vals = [float(x) for x in parts[2:]]
                if len(vals) != a_count:
                    raise ValidationError(f"{tag} row for state {s} has {len(vals)} entries")
                (cn if tag == "CN" else cd)[s] = vals
            else:
                raise ValidationError(f"unknown row tag {tag!r}")
        except (IndexError, ValueError) as exc:
            raise ValidationError(f"malformed row {ln!r}: {exc}") from exc
    if not seen_p.all():
        raise ValidationError("missing P rows")
    if np.isnan(cn).any() or np.isnan(cd).any():
        raise ValidationError("missing CN/CD rows")
    return FractionalMdp(p, cn, cd, discount, s0)


def save(mdp: FractionalMdp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(mdp))


def load(path) -> FractionalMdp:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())
