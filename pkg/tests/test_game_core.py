import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from lagrangian_cmg.game_core import (
    ConstrainedMarkovGame,
    EpochPolicySequence,
    MultichainError,
    ProductPolicy,
    compose_with,
    evaluate_stationary,
    induced_chain,
    limiting_distribution,
    marginal_without,
    recurrent_classes,
    stationary_distribution,
    validate_game,
)
from lagrangian_cmg.envs import ChainGameParams, build_chain_game

from conftest import make_game, power_stationary


def two_state_game(reward=((1.0, 0.0), (0.0, 2.0)), p_stay=(0.9, 0.7)):
    # action 0 follows the fixed chain, action 1 swaps state
    P = np.zeros((2, 2, 2))
    P[0, 0] = [p_stay[0], 1 - p_stay[0]]
    P[1, 0] = [1 - p_stay[1], p_stay[1]]
    P[0, 1] = [0, 1]
    P[1, 1] = [1, 0]
    return make_game(P, reward, cost=[[[1.0, 0.0], [0.0, 0.0]]], thresholds=[0.25])


# ---- validate_game


def test_validate_well_formed_game_reports_bounds():
    g = two_state_game()
    rep = validate_game(g)
    assert rep.ok
    assert rep.R == 2.0
    assert rep.B == 0.75


def test_validate_names_bad_kernel_row():
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 1.0
    P[1, 1] = [0.5, 0.4]
    g = make_game(P, np.zeros((2, 2)))
    rep = validate_game(g)
    assert not rep.ok
    assert any("s=1, a=1" in v and "0.9" in v for v in rep.violations)


def test_validate_empty_action_set_and_negative_entry():
    P = np.zeros((1, 2, 1))
    P[0, :, 0] = 1.0
    allowed = (np.array([[False, False]]), np.array([[True]]))
    g = make_game(P, np.zeros((1, 2)), allowed=allowed)
    assert any("no allowed action" in v for v in validate_game(g).violations)
    P2 = np.array([[[1.5, -0.5], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]])
    assert any("negative" in v for v in validate_game(make_game(P2, np.zeros((2, 2)))).violations)


def test_shr_bound_constant(shr):
    rep = validate_game(shr)
    assert rep.ok
    assert rep.B == pytest.approx(max(2 - 0.5, 0.5))
    for b in (0.25, 0.75):
        assert validate_game(shr.with_thresholds([b])).B == pytest.approx(max(2 - b, b))


def test_game_needs_two_agents_and_consistent_shapes():
    with pytest.raises(ValueError):
        ConstrainedMarkovGame(1, (1,), (np.ones((1, 1), bool),), np.zeros((1, 1, 1)), np.zeros((0, 1, 1)),
                              np.zeros(0), sp.csr_matrix(np.ones((1, 1))))
    with pytest.raises(ValueError, match="reward shape"):
        ConstrainedMarkovGame(1, (1, 1), (np.ones((1, 1), bool),) * 2, np.zeros((1, 1, 1)),
                              np.zeros((0, 1, 1)), np.zeros(0), sp.csr_matrix(np.ones((1, 1))))


def test_game_arrays_are_read_only():
    g = two_state_game()
    with pytest.raises(ValueError):
        g.reward[0, 0, 0] = 5.0


# ---- induced_chain


def test_induced_chain_deterministic_is_zero_one():
    g = two_state_game()
    pi = ProductPolicy.deterministic(g, [[1, 1], [0, 0]])
    assert np.array_equal(induced_chain(g, pi), [[0.0, 1.0], [1.0, 0.0]])


def test_induced_chain_single_state_uniform():
    g = make_game(np.ones((1, 2, 1)), np.zeros((1, 2)))
    assert np.array_equal(induced_chain(g, ProductPolicy.uniform(g)), [[1.0]])


def test_induced_chain_matches_hand_expansion_two_agents():
    rng = np.random.default_rng(3)
    P = rng.dirichlet(np.ones(2), size=(2, 4))
    g = make_game(P, np.zeros((2, 4)), action_counts=(2, 2))
    p1 = np.array([[0.3, 0.7], [0.6, 0.4]])
    p2 = np.array([[0.2, 0.8], [0.5, 0.5]])
    pi = ProductPolicy((p1, p2))
    want = np.zeros((2, 2))
    for s in range(2):
        for a1, a2 in itertools.product(range(2), range(2)):
            want[s] += p1[s, a1] * p2[s, a2] * P[s, 2 * a1 + a2]
    assert np.allclose(induced_chain(g, pi), want, atol=1e-15)
    assert np.allclose(induced_chain(g, pi).sum(axis=1), 1.0, atol=1e-10)


def test_induced_chain_rejects_mismatched_policy():
    g = two_state_game()
    with pytest.raises(ValueError):
        induced_chain(g, ProductPolicy((np.ones((3, 2)) / 2, np.ones((3, 1)))))


# ---- stationary_distribution


def test_stationary_symmetric_chain():
    assert np.allclose(stationary_distribution([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5], atol=1e-15)


def test_stationary_two_state_hand_solved():
    assert np.allclose(stationary_distribution([[0.9, 0.1], [0.3, 0.7]]), [0.75, 0.25], atol=1e-14)


def test_stationary_periodic_cycle():
    assert np.allclose(stationary_distribution([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], atol=1e-15)


def test_stationary_multichain_names_two_states():
    P = np.eye(3)
    P[1] = [0.5, 0.0, 0.5]
    with pytest.raises(MultichainError) as exc:
        stationary_distribution(P)
    assert exc.value.states == (0, 2)
    assert "0" in str(exc.value) and "2" in str(exc.value)


def test_stationary_with_transient_state():
    P = np.array([[0.0, 1.0, 0.0], [0.0, 0.5, 0.5], [0.0, 0.5, 0.5]])
    assert np.allclose(stationary_distribution(P), [0.0, 0.5, 0.5], atol=1e-15)


def test_recurrent_classes_ignore_transient():
    P = np.array([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    classes = recurrent_classes(P)
    assert [c.tolist() for c in classes] == [[1], [2]]


def test_limiting_distribution_mixes_classes_by_absorption():
    P = np.array([[0.0, 0.25, 0.75], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(limiting_distribution(P, 0), [0.0, 0.25, 0.75], atol=1e-15)
    assert np.allclose(limiting_distribution(P, 2), [0.0, 0.0, 1.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_stationary_matches_power_iteration(n, seed):
    P = np.random.default_rng(seed).dirichlet(np.ones(n), size=n)
    mu = stationary_distribution(P)
    assert abs(mu.sum() - 1) < 1e-12
    assert np.allclose(mu, power_stationary(P), atol=1e-10)


# ---- evaluate_stationary


def test_evaluate_single_state_constant_reward():
    g = make_game(np.ones((1, 1, 1)), np.ones((1, 1)), action_counts=(1, 1))
    assert evaluate_stationary(g, ProductPolicy.uniform(g)).gain_per_agent[0] == 1.0


def test_evaluate_deterministic_cycle():
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    g = make_game(P, [[0.0], [2.0]], action_counts=(1, 1))
    assert evaluate_stationary(g, ProductPolicy.uniform(g)).gain_per_agent[0] == pytest.approx(1.0, abs=1e-15)


def test_evaluate_hand_solved_chain():
    P = np.array([[[0.9, 0.1]], [[0.3, 0.7]]])
    g = make_game(P, [[4.0], [0.0]], cost=[[[1.0], [0.0]]], thresholds=[0.0], action_counts=(1, 1))
    ev = evaluate_stationary(g, ProductPolicy.uniform(g))
    assert ev.gain_per_agent[0] == pytest.approx(3.0, abs=1e-13)
    assert ev.gain_per_constraint[0] == pytest.approx(0.75, abs=1e-13)
    assert ev.occupation.sum() == pytest.approx(1.0, abs=1e-12)


def test_evaluate_multichain_raises_unless_started():
    P = np.zeros((2, 1, 2))
    P[0, 0, 0] = P[1, 0, 1] = 1.0
    g = make_game(P, [[1.0], [3.0]], action_counts=(1, 1))
    pi = ProductPolicy.uniform(g)
    with pytest.raises(MultichainError):
        evaluate_stationary(g, pi)
    assert evaluate_stationary(g, pi, initial_state=1).gain_per_agent[0] == 3.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_evaluation_bounds_and_occupation(seed):
    game, _ = build_chain_game(ChainGameParams(num_states=3, action_counts=(2, 3), num_constraints=2, seed=seed))
    rng = np.random.default_rng(seed)
    pi = ProductPolicy(tuple(rng.dirichlet(np.ones(n), size=3) for n in game.action_counts))
    ev = evaluate_stationary(game, pi)
    R, B = game.bounds()
    assert abs(ev.occupation.sum() - 1) < 1e-10
    assert np.all(np.abs(ev.gain_per_agent) <= R + 1e-12)
    assert np.all(np.abs(ev.gain_per_constraint - game.thresholds) <= B + 1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_evaluation_invariant_under_state_relabeling(seed):
    rng = np.random.default_rng(seed)
    S, A = 4, 2
    P = rng.dirichlet(np.ones(S), size=(S, A))
    r = rng.uniform(-1, 1, size=(S, A))
    pol = rng.dirichlet(np.ones(A), size=S)
    g = make_game(P, r)
    perm = rng.permutation(S)
    # new label k is old state perm[k]
    Pp = P[perm][:, :, perm]
    gp = make_game(Pp, r[perm])
    v = evaluate_stationary(g, ProductPolicy((pol, np.ones((S, 1))))).gain_per_agent
    vp = evaluate_stationary(gp, ProductPolicy((pol[perm], np.ones((S, 1))))).gain_per_agent
    assert np.allclose(v, vp, atol=1e-12)


def test_empirical_average_matches_gain():
    # long seeded rollout on an aperiodic unichain game
    from lagrangian_cmg.dynamics import rollout_epoch

    game, _ = build_chain_game(ChainGameParams(num_states=3, action_counts=(2, 2), seed=7))
    pi = ProductPolicy.uniform(game)
    V = evaluate_stationary(game, pi).gain_per_agent[0]
    roll = rollout_epoch(game, pi, 0, 1_000_000, np.random.default_rng(0))
    r = roll.rewards[:, 0]
    assert abs(r.mean() - V) <= 3 * r.std() / np.sqrt(len(r)) + 1e-3


# ---- policies


def test_policy_validation():
    with pytest.raises(ValueError):
        ProductPolicy((np.array([[0.5, 0.6]]), np.ones((1, 1))))
    with pytest.raises(ValueError):
        ProductPolicy((np.array([[1.5, -0.5]]), np.ones((1, 1))))
    g = make_game(np.ones((1, 2, 1)), np.zeros((1, 2)),
                  allowed=(np.array([[True, False]]), np.array([[True]])))
    with pytest.raises(ValueError, match="disallowed"):
        ProductPolicy((np.array([[0.5, 0.5]]), np.ones((1, 1)))).check_against(g)


def test_marginal_without_two_agents():
    p1 = np.array([[0.3, 0.7]])
    p2 = np.array([[0.1, 0.2, 0.7]])
    pi = ProductPolicy((p1, p2))
    assert np.array_equal(marginal_without(pi, 0), p2)
    assert np.array_equal(marginal_without(pi, 1), p1)


def test_marginal_without_three_uniform_agents():
    pi = ProductPolicy((np.full((2, 2), 0.5), np.full((2, 2), 0.5), np.full((2, 4), 0.25)))
    assert np.allclose(marginal_without(pi, 0), 1 / 8)
    with pytest.raises(IndexError):
        marginal_without(pi, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2))
def test_compose_round_trip_is_exact(seed, agent):
    rng = np.random.default_rng(seed)
    pi = ProductPolicy(tuple(rng.dirichlet(np.ones(n), size=3) for n in (2, 3, 2)))
    joint = pi.joint()
    assert np.array_equal(compose_with(pi, agent, pi.probs[agent]), joint)
    # and the marginal really is the others' part of the joint
    own = pi.probs[agent]
    summed = np.moveaxis(joint.reshape(3, 2, 3, 2), agent + 1, 1).sum(axis=1).reshape(3, -1)
    assert np.allclose(summed, marginal_without(pi, agent) * own.sum(axis=1, keepdims=True), atol=1e-15)


def test_epoch_policy_lookup():
    a = ProductPolicy((np.array([[1.0, 0.0]]), np.ones((1, 1))))
    b = ProductPolicy((np.array([[0.0, 1.0]]), np.ones((1, 1))))
    seq = EpochPolicySequence((a, b), epoch_length=3)
    assert [seq.at(t) is a for t in range(6)] == [True] * 3 + [False] * 3
