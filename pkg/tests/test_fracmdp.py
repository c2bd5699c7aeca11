import numpy as np
import pytest

from aoisched.fracmdp import (
    FractionalMdp,
    SolverError,
    ValidationError,
    dinkelbach_exact,
    dumps,
    enumerate_oracle,
    evaluate_policy,
    greedy_action_sets,
    loads,
    random_fractional_mdp,
    reachable_states,
    solve_given_gamma,
)
from oracles import mc_policy_value


def single_state_mdp(delta=0.5):
    # actions: a1 -> (c_N=2, c_D=1), a2 -> (c_N=3, c_D=2); one absorbing state
    p = np.ones((1, 2, 1))
    cn = np.array([[2.0, 3.0]])
    cd = np.array([[1.0, 2.0]])
    return FractionalMdp(p, cn, cd, delta)


def test_rejects_non_stochastic_rows():
    p = np.ones((1, 1, 1)) * 0.5
    with pytest.raises(ValidationError):
        FractionalMdp(p, np.ones((1, 1)), np.ones((1, 1)), 0.5)


def test_rejects_zero_denominator_cost():
    p = np.ones((1, 1, 1))
    with pytest.raises(ValidationError):
        FractionalMdp(p, np.ones((1, 1)), np.zeros((1, 1)), 0.5)


def test_rejects_discount_outside_open_interval():
    p = np.ones((1, 1, 1))
    for delta in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValidationError):
            FractionalMdp(p, np.ones((1, 1)), np.ones((1, 1)), delta)


def test_evaluate_policy_geometric_series():
    p = np.ones((1, 1, 1))
    mdp = FractionalMdp(p, np.array([[1.0]]), np.array([[1.0]]), 0.5)
    pv = evaluate_policy(mdp, [0])
    assert pv.n_value == pytest.approx(2.0, abs=1e-12)
    assert pv.d_value == pytest.approx(2.0, abs=1e-12)
    assert pv.ratio == pytest.approx(1.0, abs=1e-12)


def test_evaluate_policy_second_action():
    pv = evaluate_policy(single_state_mdp(), [1])
    assert pv.n_value == pytest.approx(6.0, abs=1e-12)
    assert pv.d_value == pytest.approx(4.0, abs=1e-12)
    assert pv.ratio == pytest.approx(1.5, abs=1e-12)


# Frozen Monte-Carlo oracle output for the fixture below: 10^6 truncated
# rollouts (horizon 250, oracle seed 7); see oracles.mc_policy_value.
MC_FIXTURE_SEED = 20240817
MC_POLICY = [2, 0, 1]
MC_N, MC_N_SE = 4.499697266687216, 0.0007164524596131686
MC_D, MC_D_SE = 5.8284018515046725, 0.0005381912456211147


def mc_fixture_mdp():
    return random_fractional_mdp(np.random.default_rng(MC_FIXTURE_SEED), 3, 3, 0.9)


def test_evaluate_policy_matches_monte_carlo_oracle():
    pv = evaluate_policy(mc_fixture_mdp(), MC_POLICY)
    assert abs(pv.n_value - MC_N) <= 3 * MC_N_SE
    assert abs(pv.d_value - MC_D) <= 3 * MC_D_SE


@pytest.mark.slow
def test_monte_carlo_frozen_values_reproduce():
    n_mc, n_se, d_mc, d_se = mc_policy_value(
        mc_fixture_mdp(), MC_POLICY, n_rollouts=1_000_000, horizon=250, seed=7
    )
    assert n_mc == pytest.approx(MC_N, abs=1e-9)
    assert d_mc == pytest.approx(MC_D, abs=1e-9)
    assert n_se == pytest.approx(MC_N_SE, rel=1e-6)
    assert d_se == pytest.approx(MC_D_SE, rel=1e-6)


def test_solve_given_gamma_hand_fixed_point():
    mdp = single_state_mdp()
    # gamma = 1.5: V = min(0.5 + 0.5 V, 0 + 0.5 V) => V = 0
    tab = solve_given_gamma(mdp, 1.5, tol=1e-12)
    assert tab.q[0, 0] == pytest.approx(0.5, abs=1e-9)
    assert tab.q[0, 1] == pytest.approx(0.0, abs=1e-9)
    assert tab.greedy()[0] == 1
    # gamma = 2: V = -1 + 0.5 V => V = -2
    tab2 = solve_given_gamma(mdp, 2.0, tol=1e-12)
    assert tab2.q[0, 0] == pytest.approx(-1.0, abs=1e-9)
    assert tab2.q[0, 1] == pytest.approx(-2.0, abs=1e-9)
    assert tab2.greedy()[0] == 1
    assert tab2.n[0, 1] == pytest.approx(6.0, abs=1e-9)
    assert tab2.d[0, 1] == pytest.approx(4.0, abs=1e-9)


def test_solve_given_gamma_zero_cost_when_proportional():
    rng = np.random.default_rng(3)
    mdp = random_fractional_mdp(rng, 4, 3, 0.8)
    prop = FractionalMdp(mdp.transition, 3.0 * mdp.cost_d, mdp.cost_d, 0.8)
    tab = solve_given_gamma(prop, 3.0, tol=1e-12)
    assert np.abs(tab.q).max() < 1e-9


def test_solve_given_gamma_rejects_bad_tol():
    with pytest.raises(ValidationError):
        solve_given_gamma(single_state_mdp(), 1.0, tol=0.0)


def test_qtable_decomposition_identity():
    rng = np.random.default_rng(11)
    for _ in range(5):
        mdp = random_fractional_mdp(rng, 4, 3, 0.9)
        gamma = float(rng.uniform(0.0, 3.0))
        tab = solve_given_gamma(mdp, gamma, tol=1e-11)
        assert np.abs(tab.q - (tab.n - gamma * tab.d)).max() < 1e-9


def test_dinkelbach_two_action_instance():
    mdp = single_state_mdp()
    gamma, policy = dinkelbach_exact(mdp, tol=1e-9)
    assert gamma == pytest.approx(1.5, abs=1e-9)
    assert policy[0] == 1
    # gamma_1 is the all-first-action ratio 4/2 = 2; one outer update lands on 1.5
    pv1 = evaluate_policy(mdp, [0])
    assert pv1.ratio == pytest.approx(2.0, abs=1e-12)


def test_dinkelbach_constant_quotient():
    rng = np.random.default_rng(5)
    base = random_fractional_mdp(rng, 3, 2, 0.7)
    kappa = 2.25
    mdp = FractionalMdp(base.transition, kappa * base.cost_d, base.cost_d, 0.7)
    gamma, _ = dinkelbach_exact(mdp, tol=1e-10)
    assert gamma == pytest.approx(kappa, abs=1e-8)


def test_dinkelbach_matches_enumeration_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(8):
        mdp = random_fractional_mdp(rng, 3, 3, 0.9)
        g_enum, _ = enumerate_oracle(mdp)
        g_dink, _ = dinkelbach_exact(mdp, tol=1e-9)
        assert abs(g_dink - g_enum) <= 1e-6


def test_dinkelbach_nonconvergence_carries_trace():
    with pytest.raises(SolverError) as exc:
        dinkelbach_exact(single_state_mdp(), tol=1e-12, max_iter=1)
    assert exc.value.trace


def test_enumerate_oracle_two_actions():
    gamma, policy = enumerate_oracle(single_state_mdp())
    assert gamma == pytest.approx(1.5, abs=1e-12)
    assert policy[0] == 1


def test_enumerate_oracle_equal_channels_gamma_one():
    rng = np.random.default_rng(9)
    base = random_fractional_mdp(rng, 3, 2, 0.85)
    mdp = FractionalMdp(base.transition, base.cost_d, base.cost_d, 0.85)
    gamma, policy = enumerate_oracle(mdp)
    assert gamma == pytest.approx(1.0, abs=1e-12)
    # exact ties everywhere -> lexicographically smallest policy retained
    assert np.all(policy == 0)


def test_enumerate_oracle_size_guard():
    rng = np.random.default_rng(1)
    mdp = random_fractional_mdp(rng, 4, 4, 0.9)
    with pytest.raises(ValidationError):
        enumerate_oracle(mdp, max_policies=100)


def test_dinkelbach_sign_structure_on_gamma_grid():
    rng = np.random.default_rng(13)
    mdp = random_fractional_mdp(rng, 3, 3, 0.9)
    g_star, _ = enumerate_oracle(mdp)
    s0 = mdp.initial_state
    for offset in (-0.2, -0.05, 0.05, 0.2):
        tab = solve_given_gamma(mdp, g_star + offset, tol=1e-11)
        f = tab.q[s0].min()
        if offset < 0:
            assert f > 1e-9
        else:
            assert f < -1e-9
    tab = solve_given_gamma(mdp, g_star, tol=1e-11)
    assert abs(tab.q[s0].min()) < 1e-6


def test_outer_sequence_monotone_from_above():
    rng = np.random.default_rng(17)
    for _ in range(4):
        mdp = random_fractional_mdp(rng, 4, 3, 0.9)
        g_star, _ = enumerate_oracle(mdp)
        gamma = evaluate_policy(mdp, np.zeros(4, dtype=int)).ratio
        assert gamma >= g_star - 1e-12
        seq = [gamma]
        for _ in range(30):
            tab = solve_given_gamma(mdp, seq[-1], tol=1e-11)
            a = int(tab.q[mdp.initial_state].argmin())
            if abs(tab.q[mdp.initial_state, a]) <= 1e-10:
                break
            seq.append(float(tab.n[mdp.initial_state, a] / tab.d[mdp.initial_state, a]))
        diffs = np.diff(seq)
        assert np.all(diffs <= 1e-12)
        assert all(g >= g_star - 1e-9 for g in seq)


def test_lemma1_equivalence_on_enumerable_instances():
    # The argmin-ratio policy set agrees with the greedy set of the
    # scalarized solve at gamma*, on states reachable from s0.
    rng = np.random.default_rng(19)
    instances = [single_state_mdp()] + [
        random_fractional_mdp(rng, s, a, 0.9)
        for s, a in [(2, 2), (3, 2), (3, 3), (2, 3)]
    ]
    for mdp in instances:
        g_star, _ = enumerate_oracle(mdp)
        tab = solve_given_gamma(mdp, g_star, tol=1e-12)
        greedy_sets = greedy_action_sets(tab, tie_tol=1e-7)
        # collect optimal-policy action choices on their own reachable sets
        import itertools

        optimal_choices: dict[int, set[int]] = {}
        for actions in itertools.product(
            range(mdp.num_actions), repeat=mdp.num_states
        ):
            pol = np.array(actions, dtype=int)
            if evaluate_policy(mdp, pol).ratio <= g_star + 1e-9:
                for s in reachable_states(mdp, pol):
                    optimal_choices.setdefault(s, set()).add(int(pol[s]))
        for s, chosen in optimal_choices.items():
            assert chosen == greedy_sets[s], f"state {s}: {chosen} != {greedy_sets[s]}"


def test_gamma_star_scales_with_cost_channels():
    rng = np.random.default_rng(23)
    mdp = random_fractional_mdp(rng, 3, 2, 0.9)
    g_star, _ = enumerate_oracle(mdp)
    for kappa in (0.5, 2.0, 7.0):
        g_n, _ = enumerate_oracle(mdp.scaled(kappa_n=kappa))
        assert g_n == pytest.approx(kappa * g_star, rel=1e-9)
        g_d, _ = enumerate_oracle(mdp.scaled(kappa_d=kappa))
        assert g_d == pytest.approx(g_star / kappa, rel=1e-9)


def test_text_roundtrip():
    rng = np.random.default_rng(29)
    mdp = random_fractional_mdp(rng, 3, 2, 0.9)
    back = loads(dumps(mdp))
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.cost_n, mdp.cost_n)
    assert np.array_equal(back.cost_d, mdp.cost_d)
    assert back.discount == mdp.discount
    assert back.initial_state == mdp.initial_state


def test_loads_rejects_missing_rows_and_bad_header():
    with pytest.raises(ValidationError):
        loads("not a header\n")
    rng = np.random.default_rng(31)
    text = dumps(random_fractional_mdp(rng, 2, 2, 0.9))
    truncated = "\n".join(text.splitlines()[:-1])
    with pytest.raises(ValidationError):
        loads(truncated)
