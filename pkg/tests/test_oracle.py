import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lagrangian_cmg.envs import ChainGameParams, ShrConfig, build_chain_game, build_shr, shr_state
from lagrangian_cmg.game_core import ProductPolicy, evaluate_stationary
from lagrangian_cmg.lagrangian import build_lagrangian_game
from lagrangian_cmg.oracle import (
    OracleError,
    best_response_residual,
    brute_force_ne,
    brute_force_optimum,
    danskin_check,
    generalized_dual,
    make_oracle,
    multichain_policy_iteration,
    optimistic_policy_iteration,
    relative_value_iteration,
    solve_identical_interest,
)

from conftest import enumerate_joint_gains, make_game, power_stationary


def random_ii_game(seed, max_states=4, max_actions=3):
    rng = np.random.default_rng(seed)
    params = ChainGameParams(num_states=int(rng.integers(1, max_states + 1)),
                             action_counts=tuple(int(x) for x in rng.integers(1, max_actions + 1, size=2)),
                             seed=seed)
    return build_chain_game(params)[0]


# ---- identical-interest RVI


def test_single_state_argmax():
    g = make_game(np.ones((1, 2, 1)), [[0.0, 1.0]], action_counts=(2, 1))
    res = solve_identical_interest(g)
    assert res.policy.probs[0].tolist() == [[0.0, 1.0]]
    assert res.gain[0] == pytest.approx(1.0, abs=1e-9)


def test_two_state_matches_exhaustive_enumeration():
    rng = np.random.default_rng(11)
    P = rng.dirichlet(np.ones(2), size=(2, 2))
    r = rng.uniform(-1, 1, size=(2, 2))
    g = make_game(P, r)
    best = max(
        evaluate_stationary(g, ProductPolicy.deterministic(g, [acts, [0, 0]])).gain_per_agent[0]
        for acts in itertools.product(range(2), repeat=2)
    )
    res = solve_identical_interest(g)
    assert res.gain[0] == pytest.approx(best, abs=1e-9)
    assert np.all(res.gain == res.gain[0])


@pytest.mark.parametrize("seed", range(20))
def test_rvi_equals_independent_enumeration(seed):
    game = random_ii_game(seed)
    lam = np.random.default_rng(seed).uniform(0, 2, size=1)
    lg = build_lagrangian_game(game, lam)
    res = solve_identical_interest(lg, tol=1e-9)
    want = enumerate_joint_gains(game.dense_kernel(), lg.augmented_reward[0])
    assert abs(res.gain[0] - want) <= 1e-6
    assert res.residual <= 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_rvi_affine_shift(seed, c):
    game = random_ii_game(seed)
    r = game.reward[0]
    a = relative_value_iteration(r, game.kernel, game.joint_allowed(), tol=1e-10)
    b = relative_value_iteration(r + c, game.kernel, game.joint_allowed(), tol=1e-10)
    assert b.gain - a.gain == pytest.approx(c, abs=1e-9)
    assert np.array_equal(a.greedy, b.greedy) or abs(b.gain - a.gain - c) < 1e-9


def test_non_identical_rewards_rejected():
    game, _ = build_chain_game(ChainGameParams(identical_interest=False, seed=2))
    with pytest.raises(ValueError, match="identical-interest"):
        solve_identical_interest(game)


def test_max_iter_flags_non_convergence():
    game = random_ii_game(3)
    res = solve_identical_interest(game, tol=1e-300, max_iter=3)
    assert not res.converged
    assert res.iterations == 3


def test_tie_break_lowest_joint_index():
    g = make_game(np.ones((1, 4, 1)), [[1.0, 2.0, 2.0, 0.0]], action_counts=(2, 2))
    res = solve_identical_interest(g)
    assert g.joint_index([p.argmax() for p in (res.policy.probs[0][0], res.policy.probs[1][0])]) == 1


def test_shr_lambda_zero_routes_to_stag(shr):
    s0 = shr_state(12, 14)
    res = solve_identical_interest(build_lagrangian_game(shr, [0.0]))
    ev = evaluate_stationary(shr, res.policy, initial_state=s0)
    # without a stay action the best the hunters can do is alternate on and off the stag
    assert ev.state_distribution[shr_state(13, 13)] == pytest.approx(0.5, abs=1e-12)
    gain = res.state_gain[s0]
    assert gain == pytest.approx(ev.gain_per_agent[0], abs=1e-8)
    # hand value: 20 every other step minus twice the interior point-mass KL, ln(1 / 0.025)
    assert gain == pytest.approx(10 - 2 * math.log(40), abs=1e-8)

    # compare with every synchronised two-cell camp on a hare or rest cell
    cfg = ShrConfig()

    def nbrs(c):
        r, col = divmod(c - 1, 5)
        out = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            if 0 <= r + dr < 5 and 0 <= col + dc < 5:
                out.append((r + dr) * 5 + col + dc + 1)
        return out

    def R(c):
        return 20.0 * (c in cfg.stag_cells) + 2.0 * 2 * (c in cfg.hare_cells)

    for c in cfg.hare_cells + cfg.rest_cells:
        for d in nbrs(c):
            camp = (R(c) + R(d)) / 2 - (math.log(10 * len(nbrs(c))) + math.log(10 * len(nbrs(d))))
            assert gain >= camp - 1e-9


# ---- optimistic policy iteration


@pytest.mark.parametrize("seed", range(10))
def test_opi_matches_rvi(seed):
    game = random_ii_game(seed)
    a = solve_identical_interest(game)
    b = optimistic_policy_iteration(game)
    assert b.converged
    assert b.gain[0] == pytest.approx(a.gain[0], abs=1e-7)


def test_opi_on_shr(shr):
    s0 = shr_state(12, 14)
    lg = build_lagrangian_game(shr, [5.0])
    a = solve_identical_interest(lg)
    b = optimistic_policy_iteration(lg, sweeps=20)
    assert b.state_gain[s0] == pytest.approx(a.state_gain[s0], abs=1e-7)


# ---- brute force


def test_brute_force_contains_rvi_argmax():
    game = random_ii_game(5)
    res = solve_identical_interest(game)
    found = brute_force_ne(game)
    assert any(all(np.array_equal(p, q) for p, q in zip(f.policy.probs, res.policy.probs)) for f in found)
    assert brute_force_optimum(game) == pytest.approx(res.gain[0], abs=1e-9)


def test_matching_pennies_has_no_pure_ne():
    r1 = np.array([[1.0, -1.0, -1.0, 1.0]])
    g = make_game(np.ones((1, 4, 1)), np.stack([r1, -r1]), action_counts=(2, 2))
    assert brute_force_ne(g) == []
    with pytest.raises(OracleError):
        make_oracle("brute_force")(build_lagrangian_game(g, []), None)


def test_coordination_game_both_optima():
    # state 0: coordinate on matching actions; state 1: a single forced action
    P = np.full((2, 4, 2), 0.5)
    r = np.array([[1.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]])
    allowed = tuple(np.array([[True, True], [True, False]]) for _ in range(2))
    g = make_game(P, r, action_counts=(2, 2), allowed=allowed)
    found = brute_force_ne(g)
    profiles = sorted((int(f.policy.probs[0][0].argmax()), int(f.policy.probs[1][0].argmax())) for f in found)
    assert profiles == [(0, 0), (1, 1)]


def test_enumeration_guard():
    g = make_game(np.ones((8, 9, 8)) / 8, np.zeros((8, 9)), action_counts=(3, 3))
    with pytest.raises(ValueError, match="guard"):
        brute_force_ne(g)


# ---- generalized dual, residuals, Danskin


def test_dual_at_zero_equals_oracle_gain():
    game = random_ii_game(8)
    res = solve_identical_interest(build_lagrangian_game(game, [0.0]), tol=1e-11)
    for i in range(2):
        assert generalized_dual(game, [0.0], i, res.policy) == pytest.approx(res.gain[0], abs=1e-8)


def test_dual_single_state_is_best_mixture_reply():
    r = np.array([[3.0, 0.0, 1.0, 2.0]])  # joint (a1, a2) row-major
    c = np.array([[[1.0, 0.0, 0.0, 1.0]]])
    g = make_game(np.ones((1, 4, 1)), r, cost=c, thresholds=[0.5], action_counts=(2, 2))
    pi = ProductPolicy((np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]])))
    lam = 2.0
    aug = r[0] + lam * (c[0, 0] - 0.5)
    want = max(0.25 * aug[0] + 0.75 * aug[1], 0.25 * aug[2] + 0.75 * aug[3])
    assert generalized_dual(g, [lam], 0, pi) == pytest.approx(want, abs=1e-9)


def test_dual_two_state_matches_agent_enumeration():
    rng = np.random.default_rng(4)
    P = rng.dirichlet(np.ones(2), size=(2, 4))
    r = rng.uniform(-1, 1, size=(2, 2, 4))
    g = make_game(P, r, cost=rng.uniform(-1, 1, size=(1, 2, 4)), thresholds=[0.1], action_counts=(2, 2))
    other = rng.dirichlet(np.ones(2), size=2)
    lam = 0.7
    aug = r[1] + lam * (g.cost[0] - 0.1)
    best = -np.inf
    for acts in itertools.product(range(2), repeat=2):
        chain = np.zeros((2, 2))
        rew = np.zeros(2)
        for s in range(2):
            for a0 in range(2):
                j = a0 * 2 + acts[s]  # agent 1 deviates, agent 0 plays its mixture
                chain[s] += other[s, a0] * P[s, j]
                rew[s] += other[s, a0] * aug[s, j]
        best = max(best, power_stationary(chain) @ rew)
    pi = ProductPolicy((other, np.full((2, 2), 0.5)))
    assert generalized_dual(g, [lam], 1, pi) == pytest.approx(best, abs=1e-9)


def test_residual_zero_at_oracle_and_positive_when_perturbed():
    game, _ = build_chain_game(ChainGameParams(num_states=3, action_counts=(2, 2), seed=9))
    lg = build_lagrangian_game(game, [1.0])
    res = solve_identical_interest(lg, tol=1e-10)
    for i in range(2):
        assert abs(best_response_residual(lg, res.policy, i)) <= 10 * 1e-9
    p = res.policy.probs[0].copy()
    p[0] = 0.5 * p[0] + 0.5 * p[0][::-1]  # half the mass on the other action at state 0
    assert best_response_residual(lg, res.policy.replace(0, p), 0) > 1e-6


def test_residual_hand_built_gap():
    g = make_game(np.ones((1, 2, 1)), [[1.0, 0.0]], action_counts=(2, 1))
    pi = ProductPolicy((np.array([[0.5, 0.5]]), np.ones((1, 1))))
    assert best_response_residual(build_lagrangian_game(g, []), pi, 0) == pytest.approx(0.5, abs=1e-12)


def test_danskin_equal_multipliers():
    game = random_ii_game(1)
    rep = danskin_check(game, [1.3], [1.3])
    assert rep.lhs == pytest.approx(0.0, abs=1e-12) and rep.rhs == 0.0 and rep.satisfied


def test_danskin_default_reference_is_zero():
    rep = danskin_check(random_ii_game(2), [0.8])
    assert np.array_equal(rep.lambda_plus, [0.0])


def test_danskin_shr(shr):
    rep = danskin_check(shr, [5.0], [0.0], initial_state=shr_state(12, 14))
    assert rep.satisfied


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_danskin_random_trials(seed):
    rng = np.random.default_rng(seed)
    game, _ = build_chain_game(ChainGameParams(num_states=2, action_counts=(2, 2), seed=seed))
    rep = danskin_check(game, rng.uniform(0, 3, 1), rng.uniform(0, 3, 1), agent=int(rng.integers(2)))
    assert rep.satisfied


def test_multichain_pi_state_dependent_gains():
    # two absorbing states with rewards 1 and 3, a chooser state that can reach either
    P = np.zeros((3, 2, 3))
    P[0, 0, 1] = P[0, 1, 2] = 1.0
    P[1, :, 1] = P[2, :, 2] = 1.0
    r = np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 3.0]])
    import scipy.sparse as sp

    sol = multichain_policy_iteration(r, sp.csr_matrix(P.reshape(6, 3)), np.ones((3, 2), bool))
    assert sol.converged
    assert np.allclose(sol.state_gain, [3.0, 1.0, 3.0])
    assert sol.greedy[0] == 1


def test_make_oracle_kinds():
    game = random_ii_game(6)
    lg = build_lagrangian_game(game, [0.5])
    gains = [make_oracle(k)(lg, None).gain[0] for k in ("rvi", "optimistic_pi", "brute_force")]
    assert np.allclose(gains, gains[0], atol=1e-7)
    with pytest.raises(ValueError):
        make_oracle("nope")
