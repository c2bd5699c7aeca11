"""Fractional Q-Learning: a sampled inner loop inside a Dinkelbach outer loop.

Each episode runs a Speedy Q-Learning (SQL) sweep schedule against a
generative model at a fixed quotient coefficient gamma, learning the
scalarized cost c_N - gamma*c_D while carrying parallel numerator and
denominator tables that share the Q table's greedy actions.  That coupling
keeps q = n - gamma*d exact under the update algebra, so the outer quotient
update gamma' = n0/d0 is well defined straight from the learned tables.

Two stopping modes are provided: a fixed sweep budget (optionally derived
from the sample-complexity bound in :func:`inner_steps_bound`) and a
residual-certified mode that stops once the estimated uniform error is
below -alpha * q0.

:func:`run_controlled_error` replays the outer loop against exact inner
solutions with a calibrated error injection; it exists to make the linear
convergence-rate claims measurable.  See the function docstring for the
injection algebra.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .fracmdp import FractionalMdp, ValidationError, evaluate_policy, solve_given_gamma

__all__ = [
    "StopRule",
    "InnerResult",
    "FqlTrace",
    "TabularSampler",
    "inner_steps_bound",
    "run_inner",
    "exact_inner",
    "outer_update",
    "run_fql",
    "run_controlled_error",
    "rate_diagnostics",
    "trace_to_csv",
    "trace_from_csv",
]


def inner_steps_bound(z_size: int, episodes: int, zeta: float, alpha: float) -> int:
    """Sweep budget ceil(11.66 * ln(2|Z| / (E*zeta)) / alpha^2).

    Natural logarithm.  The bound is independent of the episode index, so a
    single call serves every episode of a run.
    """
    if z_size < 1 or episodes < 1:
        raise ValidationError("z_size and episodes must be positive")
    if not (0.0 < zeta < 1.0) or not (0.0 < alpha < 1.0):
        raise ValidationError("zeta and alpha must lie in (0, 1)")
    arg = 2.0 * z_size / (episodes * zeta)
    if arg <= 1.0:
        raise ValidationError("2|Z|/(E*zeta) must exceed 1")
    return math.ceil(11.66 * math.log(arg) / alpha**2)


@dataclass(frozen=True)
class StopRule:
    """Inner-loop termination policy.

    mode "bound_steps" runs a fixed number of sweeps: the explicit budget
    ``steps`` if given, else the Proposition-style bound computed from
    (|Z|, episodes, zeta, alpha).  mode "residual" stops once the certified
    error estimate satisfies eps_hat < -alpha * q0, falling back to the
    step budget (flagged) when q0 >= 0 makes that condition unsatisfiable.
    """

    alpha: float = 0.5
    mode: str = "bound_steps"
    steps: int | None = None
    episodes: int = 10
    zeta: float = 0.1

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError("alpha must lie in (0, 1)")
        if self.mode not in ("bound_steps", "residual"):
            raise ValidationError(f"unknown stop mode {self.mode!r}")
        if self.steps is not None and self.steps < 1:
            raise ValidationError("step budget must be >= 1")

    def budget(self, z_size: int) -> int:
        if self.steps is not None:
            return self.steps
        return inner_steps_bound(z_size, self.episodes, self.zeta, self.alpha)


@dataclass(frozen=True)
class InnerResult:
    """Learned values at the start state after one inner episode."""

    q0: float
    n0: float
    d0: float
    a_star: int
    steps: int
    epsilon_hat: float
    flagged: bool = False


@dataclass
class FqlTrace:
    """Per-episode record of the outer iteration."""

    episodes: list[tuple[float, InnerResult]] = field(default_factory=list)
    gamma_final: float = math.nan
    converged: bool = False

    def gammas(self) -> list[float]:
        """The full quotient sequence gamma_1 .. gamma_{E+1}."""
        seq = [g for g, _ in self.episodes]
        if not math.isnan(self.gamma_final):
            seq.append(self.gamma_final)
        return seq


class TabularSampler:
    """Generative model over a finite fractional MDP.

    Supplies synchronous sweep samples: for every (s, a) one next state drawn
    from P(.|s, a) plus the two cost channels.  Costs here are deterministic
    tables; stochastic-cost samplers only need to match this interface.
    """

    def __init__(self, mdp: FractionalMdp):
        self.mdp = mdp
        self._cum = np.cumsum(mdp.transition, axis=2)

    @property
    def num_states(self) -> int:
        return self.mdp.num_states

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    @property
    def initial_state(self) -> int:
        return self.mdp.initial_state

    @property
    def d_floor(self) -> float:
        return self.mdp.d_min

    def sample_sweep(self, rng: np.random.Generator):
        """One generative sample per (s, a): (next_state, c_N, c_D)."""
        u = rng.random((self.num_states, self.num_actions, 1))
        nxt = (u > self._cum).sum(axis=2)
        return nxt, self.mdp.cost_n, self.mdp.cost_d


def _empirical_error_bound(counts, cn_sum, cd_sum, q, gamma, delta) -> float:
    """delta/(1-delta) times the Bellman residual of q under the empirical model."""
    visits = counts.sum(axis=2)
    if np.any(visits == 0):
        return math.inf
    p_hat = counts / visits[:, :, None]
    cn_hat = cn_sum / visits
    cd_hat = cd_sum / visits
    t_q = cn_hat - gamma * cd_hat + delta * (p_hat @ q.min(axis=1))
    return delta / (1.0 - delta) * float(np.abs(t_q - q).max())


def run_inner(
    sampler: TabularSampler,
    gamma: float,
    stop: StopRule,
    rng_seed,
    check_every: int = 50,
) -> InnerResult:
    """Speedy Q-Learning sweeps at a fixed gamma, tracking the (Q, N, D) triple.

    Learning rate 1/(k+1).  The N and D tables are updated with the same
    two-point SQL rule, using the Q tables' greedy actions at the sampled
    next states, which preserves q = n - gamma*d exactly; D starts at the
    denominator-cost floor so d0 stays positive before the first visit.
    """
    rng = np.random.default_rng(rng_seed)
    delta = sampler.mdp.discount
    s0 = sampler.initial_state
    shape = (sampler.num_states, sampler.num_actions)
    z_size = shape[0] * shape[1]
    budget = stop.budget(z_size)

    n_prev = np.zeros(shape)
    d_prev = np.full(shape, sampler.d_floor)
    q_prev = n_prev - gamma * d_prev
    n_cur, d_cur, q_cur = n_prev.copy(), d_prev.copy(), q_prev.copy()

    residual_mode = stop.mode == "residual"
    counts = np.zeros(shape + (sampler.num_states,)) if residual_mode else None
    cn_sum = np.zeros(shape) if residual_mode else None
    cd_sum = np.zeros(shape) if residual_mode else None

    s_idx, a_idx = np.indices(shape)
    eps_hat = math.inf
    flagged = False
    k = 0
    while k < budget:
        nxt, cn, cd = sampler.sample_sweep(rng)
        if residual_mode:
            np.add.at(counts, (s_idx, a_idx, nxt), 1.0)
            cn_sum += cn
            cd_sum += cd
        lr = 1.0 / (k + 1.0)
        a_prev = q_prev[nxt].argmin(axis=2)
        a_cur = q_cur[nxt].argmin(axis=2)
        cost = cn - gamma * cd
        tq_prev = cost + delta * q_prev[nxt, a_prev]
        tq_cur = cost + delta * q_cur[nxt, a_cur]
        q_new = q_cur + lr * (tq_prev - q_cur) + (1.0 - lr) * (tq_cur - tq_prev)
        tn_prev = cn + delta * n_prev[nxt, a_prev]
        tn_cur = cn + delta * n_cur[nxt, a_cur]
        n_new = n_cur + lr * (tn_prev - n_cur) + (1.0 - lr) * (tn_cur - tn_prev)
        td_prev = cd + delta * d_prev[nxt, a_prev]
        td_cur = cd + delta * d_cur[nxt, a_cur]
        d_new = d_cur + lr * (td_prev - d_cur) + (1.0 - lr) * (td_cur - td_prev)
        q_prev, q_cur = q_cur, q_new
        n_prev, n_cur = n_cur, n_new
        d_prev, d_cur = d_cur, d_new
        k += 1
        if residual_mode and k % check_every == 0:
            q0 = float(q_cur[s0].min())
            eps_hat = _empirical_error_bound(counts, cn_sum, cd_sum, q_cur, gamma, delta)
            if q0 >= 0.0:
                flagged = True  # stopping condition unsatisfiable; run out the budget
                continue
            if eps_hat < -stop.alpha * q0:
                break

    a_star = int(q_cur[s0].argmin())
    if residual_mode:
        eps_hat = _empirical_error_bound(counts, cn_sum, cd_sum, q_cur, gamma, delta)
    else:
        # cheap post-hoc estimate from a fresh sweep's one-sample model
        nxt, cn, cd = sampler.sample_sweep(rng)
        t_q = cn - gamma * cd + delta * q_cur[nxt].min(axis=2)
        eps_hat = delta / (1.0 - delta) * float(np.abs(t_q - q_cur).max())
    return InnerResult(
        q0=float(q_cur[s0, a_star]),
        n0=float(n_cur[s0, a_star]),
        d0=float(d_cur[s0, a_star]),
        a_star=a_star,
        steps=k,
        epsilon_hat=float(eps_hat),
        flagged=flagged,
    )


def exact_inner(mdp: FractionalMdp, gamma: float, tol: float = 1e-12) -> InnerResult:
    """Inner result computed by the exact scalarized solver (no sampling)."""
    tab = solve_given_gamma(mdp, gamma, tol)
    s0 = mdp.initial_state
    a = int(tab.q[s0].argmin())
    return InnerResult(
        q0=float(tab.q[s0, a]),
        n0=float(tab.n[s0, a]),
        d0=float(tab.d[s0, a]),
        a_star=a,
        steps=1,
        epsilon_hat=0.0,
    )


def outer_update(inner: InnerResult) -> float:
    """Quotient update gamma' = n0 / d0."""
    if inner.d0 <= 0.0:
        raise ValidationError("inner denominator value must be positive")
    return inner.n0 / inner.d0


def run_fql(
    sampler: TabularSampler,
    gamma_1: float,
    stop: StopRule,
    episodes: int,
    rng_seed,
    gamma_tol: float = 1e-3,
    inner=None,
) -> FqlTrace:
    """Alternate inner learning and outer quotient updates for E episodes.

    ``inner`` may override the sampled learner with any callable
    (gamma, episode_rng_seed) -> InnerResult; pass e.g. an exact_inner
    closure to run the noiseless variant.  converged flips true after the
    quotient moves less than gamma_tol on two consecutive episodes.
    """
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    seeds = np.random.SeedSequence(rng_seed).spawn(episodes)
    trace = FqlTrace()
    gamma = float(gamma_1)
    small_moves = 0
    for i in range(episodes):
        if inner is None:
            result = run_inner(sampler, gamma, stop, seeds[i])
        else:
            result = inner(gamma, seeds[i])
        trace.episodes.append((gamma, result))
        try:
            gamma_next = outer_update(result)
        except ValidationError:
            trace.gamma_final = gamma
            return trace
        small_moves = small_moves + 1 if abs(gamma_next - gamma) <= gamma_tol else 0
        if small_moves >= 2:
            trace.converged = True
        gamma = gamma_next
    trace.gamma_final = gamma
    return trace


def run_controlled_error(
    mdp: FractionalMdp,
    alpha: float,
    episodes: int,
    gamma_1: float | None = None,
    error_fraction: float = 0.9,
    tight: bool = True,
    inner_tol: float = 1e-12,
) -> FqlTrace:
    """Outer loop over exact inner solutions with a calibrated error injection.

    Per episode the exact tables (q*, n*, d*) at gamma_i are computed, then an
    approximation error of size eps_i = error_fraction * alpha * |q*_i| is
    injected as a uniform upward shift carried by the numerator table, so the
    reported q0 is q*_i + eps_i and the uniform error ||q - q*|| equals eps_i
    exactly.  With ``tight`` set, the numerator/denominator pair additionally
    carries a consistent joint inflation c = (1 - error_fraction) * alpha *
    d0 / (1 - alpha); the inflation is invisible to the q-error (it cancels in
    n - gamma*d) but steers the realized contraction of gamma_i - gamma* to
    exactly alpha once the iterate enters the terminal linear segment, which
    is the regime the linear-rate statement describes.  Without ``tight`` the
    realized tail contraction is error_fraction * alpha.

    Setting error_fraction >= 1 deliberately violates the stopping condition
    (useful as a negative control); results are then flagged.
    """
    if not (0.0 < alpha < 1.0):
        raise ValidationError("alpha must lie in (0, 1)")
    if episodes < 1:
        raise ValidationError("episodes must be >= 1")
    if gamma_1 is None:
        gamma_1 = evaluate_policy_all_zero_ratio(mdp)
    trace = FqlTrace()
    gamma = float(gamma_1)
    broken = error_fraction >= 1.0
    for _ in range(episodes):
        base = exact_inner(mdp, gamma, inner_tol)
        eps = error_fraction * alpha * abs(base.q0)
        n0 = base.n0 + eps
        d0 = base.d0
        if tight and not broken:
            c = (1.0 - error_fraction) * alpha * base.d0 / (1.0 - alpha)
            n0 += gamma * c
            d0 += c
        result = InnerResult(
            q0=base.q0 + eps,
            n0=n0,
            d0=d0,
            a_star=base.a_star,
            steps=base.steps,
            epsilon_hat=eps,
            flagged=broken,
        )
        trace.episodes.append((gamma, result))
        gamma = outer_update(result)
    trace.gamma_final = gamma
    return trace


def evaluate_policy_all_zero_ratio(mdp: FractionalMdp) -> float:
    """Realized ratio of the all-first-action policy; an upper bound on gamma*."""
    return evaluate_policy(mdp, np.zeros(mdp.num_states, dtype=int)).ratio


def rate_diagnostics(trace: FqlTrace, gamma_star: float, atol: float = 1e-9) -> list[float]:
    """Ratios (gamma_{i+1} - gamma*) / (gamma_i - gamma*) for rate checks.

    Steps whose current gap |gamma_i - gamma*| falls below ``atol`` are
    excluded; an empty list means no admissible steps remain.
    """
    seq = trace.gammas()
    out = []
    for g_cur, g_next in zip(seq, seq[1:]):
        gap = g_cur - gamma_star
        if abs(gap) < atol:
            continue
        out.append((g_next - gamma_star) / gap)
    return out


_CSV_HEADER = "episode,gamma,q0,n0,d0,steps,epsilon_hat"


def trace_to_csv(trace: FqlTrace) -> str:
    """Serialize a trace to the documented per-episode CSV."""
    out = io.StringIO()
    out.write(_CSV_HEADER + "\n")
    for i, (gamma, r) in enumerate(trace.episodes, start=1):
        out.write(
            f"{i},{gamma!r},{r.q0!r},{r.n0!r},{r.d0!r},{r.steps},{r.epsilon_hat!r}\n"
        )
    return out.getvalue()


def trace_from_csv(text: str) -> FqlTrace:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValidationError("bad trace CSV header")
    trace = FqlTrace()
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 7:
            raise ValidationError(f"bad trace CSV row: {ln!r}")
        gamma = float(parts[1])
        result = InnerResult(
            q0=float(parts[2]),
            n0=float(parts[3]),
            d0=float(parts[4]),
            a_star=-1,
            steps=int(parts[5]),
            epsilon_hat=float(parts[6]),
        )
        trace.episodes.append((gamma, result))
    if trace.episodes:
        trace.gamma_final = outer_update(trace.episodes[-1][1])
    return trace
