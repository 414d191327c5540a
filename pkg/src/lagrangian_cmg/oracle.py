"""Equilibrium oracles for unconstrained (Lagrangian) Markov games and dual diagnostics.

``solve_identical_interest`` is the production oracle: when every agent
receives the same reward, a joint-action optimal policy of the underlying
average-reward MDP is a Nash equilibrium.  ``brute_force_ne`` enumerates
deterministic product policies and serves as ground truth on tiny games.

Every solver works on the aperiodic transform ``tau * P + (1 - tau) * I``,
which leaves gains and greedy policies unchanged but lets relative value
iteration converge on periodic dynamics such as the grid world.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order

from .game_core import (
    ConstrainedMarkovGame,
    MultichainError,
    ProductPolicy,
    agent_view,
    control_adjustment,
    evaluate_stationary,
    kernel_given_others,
    marginal_without,
    point_mass_control,
    recurrent_classes,
)
from .lagrangian import LagrangianGame, build_lagrangian_game, lagrangian_values

APERIODICITY = 0.5
TIE_TOL = 1e-9
ENUMERATION_GUARD = 10**6


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class OracleResult:
    policy: ProductPolicy
    gain: np.ndarray  # (N,)
    bias: np.ndarray  # (S,)
    iterations: int
    residual: float
    converged: bool = True
    state_gain: Optional[np.ndarray] = None  # (S,) gain of each state's closed class


@dataclass(frozen=True)
class DanskinReport:
    agent: int
    lambda_k: np.ndarray
    lambda_plus: np.ndarray
    lhs: float
    rhs: float
    satisfied: bool


@dataclass(frozen=True)
class RviSolution:
    bias: np.ndarray
    gain: float  # gain of the class containing the reference state
    greedy: np.ndarray  # (S,) action index
    iterations: int
    residual: float
    converged: bool
    state_gain: np.ndarray  # (S,) gain of each state's class


def _greedy(q: np.ndarray) -> np.ndarray:
    """Lowest action index among the (near-)maximisers of each row."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - TIE_TOL * np.maximum(1.0, np.abs(best)), axis=1)


def mdp_classes(kernel: sp.csr_matrix, allowed: np.ndarray) -> list[np.ndarray]:
    """Closed communicating classes of an MDP under its allowed actions.

    Returns a single class covering every state when the MDP has one closed
    class (possibly with transient states).  Several classes are returned
    only when they partition the state space, so each can be solved on its
    own; any other multichain structure raises ``OracleError``.
    """
    S = allowed.shape[0]
    classes = recurrent_classes(_mdp_graph(kernel, allowed))
    if len(classes) == 1:
        return [np.arange(S)]
    if sum(len(c) for c in classes) != S:
        raise OracleError(
            f"MDP has {len(classes)} closed classes plus transient states; "
            "general multichain average-reward problems are not supported"
        )
    return classes


def _rvi_single(r, kernel, S, A, tol, max_iter, ref, h, tau):
    span = np.inf
    gain = np.nan
    it = 0
    for it in range(1, max_iter + 1):
        q = r + tau * (kernel @ h).reshape(S, A) + (1 - tau) * h[:, None]
        th = q.max(axis=1)
        diff = th - h
        lo, hi = diff.min(), diff.max()
        span = hi - lo
        gain = 0.5 * (lo + hi)
        h = th - th[ref]
        if span <= tol:
            break
    q = r + tau * (kernel @ h).reshape(S, A) + (1 - tau) * h[:, None]
    return h, float(gain), _greedy(q), it, float(span)


def _restrict(kernel: sp.csr_matrix, cls: np.ndarray, A: int) -> sp.csr_matrix:
    rows = (cls[:, None] * A + np.arange(A)).ravel()
    return kernel[rows][:, cls].tocsr()


def relative_value_iteration(
    reward: np.ndarray,
    kernel: sp.csr_matrix,
    allowed: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    ref_state: int = 0,
    h0: Optional[np.ndarray] = None,
    tau: float = APERIODICITY,
) -> RviSolution:
    """Average-reward RVI on an MDP with rewards (S, A) and kernel (S * A, S).

    Iterates h <- T h - (T h)(ref) until span(T h - h) <= tol, so the
    reported gain (midpoint of T h - h) is within tol / 2.  Closed classes
    that partition the state space are solved independently, each with its
    smallest state as reference.
    """
    S, A = reward.shape
    r = np.where(allowed, reward, -np.inf)
    h_init = np.zeros(S) if h0 is None else np.asarray(h0, dtype=float) / tau
    classes = mdp_classes(kernel, allowed)
    bias = np.zeros(S)
    greedy = np.zeros(S, dtype=int)
    state_gain = np.zeros(S)
    iters, worst = 0, 0.0
    for cls in classes:
        if len(classes) == 1:
            K, rc, ref = kernel, r, ref_state
        else:
            K, rc, ref = _restrict(kernel, cls, A), r[cls], 0
        h = h_init[cls] - h_init[cls][ref]
        h, g, act, it, span = _rvi_single(rc, K, len(cls), A, tol, max_iter, ref, h, tau)
        # bias of the original chain is tau times the transformed one
        bias[cls] = tau * h
        greedy[cls] = act
        state_gain[cls] = g
        iters = max(iters, it)
        worst = max(worst, span)
    return RviSolution(bias, float(state_gain[ref_state]), greedy, iters, worst,
                       bool(worst <= tol), state_gain)


def _identical_reward(lgame) -> tuple[np.ndarray, ConstrainedMarkovGame]:
    if isinstance(lgame, LagrangianGame):
        r, game = lgame.action_reward(), lgame.base
    else:
        game = lgame
        pm = point_mass_control(game)
        r = game.reward if pm is None else game.reward + pm[None]
    mask = game.joint_allowed()
    if not np.all(np.abs(r - r[:1])[:, mask] <= 1e-12):
        raise ValueError("agents' rewards differ; the identical-interest solver does not apply")
    return r[0], game


def _factor(game: ConstrainedMarkovGame, joint_actions: np.ndarray) -> ProductPolicy:
    per_agent = np.unravel_index(joint_actions, game.action_counts)
    return ProductPolicy.deterministic(game, per_agent)


def solve_identical_interest(
    lgame: Union[LagrangianGame, ConstrainedMarkovGame],
    tol: float = 1e-9,
    max_iter: int = 100_000,
    warm_start: Optional[np.ndarray] = None,
) -> OracleResult:
    """Joint-action RVI; the greedy joint policy is returned as a deterministic product policy."""
    r, game = _identical_reward(lgame)
    sol = relative_value_iteration(r, game.kernel, game.joint_allowed(), tol, max_iter, h0=warm_start)
    return OracleResult(
        policy=_factor(game, sol.greedy),
        gain=np.full(game.num_agents, sol.gain),
        bias=sol.bias,
        iterations=sol.iterations,
        residual=sol.residual,
        converged=sol.converged,
        state_gain=sol.state_gain,
    )


def _opi_single(r, K, S, A, allowed, tol, max_iter, sweeps, step_size, h, tau):
    rm = np.where(allowed, r, -np.inf)
    rows = np.arange(S)

    def q_of(h):
        return rm + tau * (K @ h).reshape(S, A) + (1 - tau) * h[:, None]

    act = _greedy(q_of(h))
    span = np.inf
    gain = np.nan
    it = 0
    for it in range(1, max_iter + 1):
        P_pi = K[rows * A + act]
        r_pi = r[rows, act]
        for _ in range(sweeps):
            target = r_pi + tau * (P_pi @ h) + (1 - tau) * h
            h = h + step_size * (target - target[0] - h)
        q = q_of(h)
        diff = q.max(axis=1) - h
        span = diff.max() - diff.min()
        gain = 0.5 * (diff.max() + diff.min())
        new_act = _greedy(q)
        stable = np.array_equal(new_act, act)
        act = new_act
        if stable and span <= tol:
            break
    return h, float(gain), act, it, float(span)


def optimistic_policy_iteration(
    lgame: Union[LagrangianGame, ConstrainedMarkovGame],
    tol: float = 1e-9,
    max_iter: int = 10_000,
    sweeps: int = 20,
    step_size: float = 1.0,
    warm_start: Optional[np.ndarray] = None,
    tau: float = APERIODICITY,
) -> OracleResult:
    """Optimistic policy iteration with synchronous TD(0) evaluation.

    Each outer iteration runs ``sweeps`` expected TD(0) updates of the
    relative value function under the current greedy joint policy, then
    improves greedily.  Stops once the greedy policy is stable and the
    optimal-Bellman span residual is within ``tol``.
    """
    r, game = _identical_reward(lgame)
    S, A = r.shape
    allowed = game.joint_allowed()
    h_init = np.zeros(S) if warm_start is None else np.asarray(warm_start, dtype=float) / tau
    classes = mdp_classes(game.kernel, allowed)
    bias = np.zeros(S)
    act = np.zeros(S, dtype=int)
    state_gain = np.zeros(S)
    iters, worst = 0, 0.0
    for cls in classes:
        if len(classes) == 1:
            K, rc, ac = game.kernel, r, allowed
        else:
            K, rc, ac = _restrict(game.kernel, cls, A), r[cls], allowed[cls]
        h = h_init[cls] - h_init[cls][0]
        h, g, a, it, span = _opi_single(rc, K, len(cls), A, ac, tol, max_iter, sweeps, step_size, h, tau)
        bias[cls] = tau * h
        act[cls] = a
        state_gain[cls] = g
        iters = max(iters, it)
        worst = max(worst, span)
    return OracleResult(
        policy=_factor(game, act),
        gain=np.full(game.num_agents, state_gain[0]),
        bias=bias,
        iterations=iters,
        residual=worst,
        converged=bool(worst <= tol),
        state_gain=state_gain,
    )


# --------------------------------------------------------------------------
# brute force


def _deterministic_choices(game: ConstrainedMarkovGame, agent: int) -> list[tuple[int, ...]]:
    per_state = [np.flatnonzero(game.allowed[agent][s]).tolist() for s in range(game.num_states)]
    return list(itertools.product(*per_state))


def _rewards_for(game_like) -> tuple[np.ndarray, ConstrainedMarkovGame]:
    if isinstance(game_like, LagrangianGame):
        return game_like.action_reward(), game_like.base
    pm = point_mass_control(game_like)
    return (game_like.reward if pm is None else game_like.reward + pm[None]), game_like


def _batch_gains(P3: np.ndarray, R: np.ndarray, joint: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Gains (B, N) of deterministic joint policies joint (B, S) via stacked balance solves."""
    B, S = joint.shape
    out = np.empty((B, R.shape[0]))
    rows = np.arange(S)
    for start in range(0, B, chunk):
        J = joint[start:start + chunk]
        chains = P3[rows, J]  # (b, S, S)
        M = np.swapaxes(chains, 1, 2) - np.eye(S)
        M[:, -1, :] = 1.0
        rhs = np.zeros((len(J), S))
        rhs[:, -1] = 1.0
        try:
            mu = np.linalg.solve(M, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            for j in J:
                classes = recurrent_classes(P3[rows, j])
                if len(classes) > 1:
                    raise MultichainError(int(classes[0][0]), int(classes[1][0]), len(classes))
            raise
        r = R[:, rows, J]  # (N, b, S)
        out[start:start + len(J)] = np.einsum("bs,nbs->bn", mu, r)
    return out


def deterministic_profile_values(game_like) -> tuple[list[list[tuple[int, ...]]], np.ndarray]:
    """Average value of every deterministic product policy.

    Returns the per-agent choice lists and an array V of shape
    (N, n_1, ..., n_N) with V[i, k_1, ..., k_N] agent i's gain when agent j
    plays its k_j-th deterministic policy.
    """
    R, game = _rewards_for(game_like)
    choices = [_deterministic_choices(game, i) for i in range(game.num_agents)]
    sizes = [len(c) for c in choices]
    total = int(np.prod(sizes, dtype=object))
    if total > ENUMERATION_GUARD:
        raise ValueError(f"{total} deterministic profiles exceed the enumeration guard {ENUMERATION_GUARD}")
    arrays = [np.array(c, dtype=int).reshape(len(c), game.num_states) for c in choices]
    grids = np.meshgrid(*[np.arange(n) for n in sizes], indexing="ij")
    idx = [g.ravel() for g in grids]
    per_agent = [arrays[i][idx[i]] for i in range(game.num_agents)]  # each (B, S)
    joint = np.ravel_multi_index(tuple(per_agent), game.action_counts)
    gains = _batch_gains(game.dense_kernel(), R, joint)
    V = gains.T.reshape((game.num_agents, *sizes))
    return choices, V


def brute_force_optimum(game_like) -> float:
    """Best common gain over deterministic joint policies (identical-interest ground truth)."""
    _, V = deterministic_profile_values(game_like)
    return float(V[0].max())


def _poisson_bias(chain: np.ndarray, r: np.ndarray, g: float) -> np.ndarray:
    # (I - P) h = r - g with h(0) = 0 appended as an extra equation
    S = chain.shape[0]
    A = np.vstack([np.eye(S) - chain, np.eye(S)[0]])
    rhs = np.concatenate([r - g, [0.0]])
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


def brute_force_ne(game_like, require_product: bool = True, tol: float = 1e-9) -> list[OracleResult]:
    """All deterministic stationary product policies with no profitable deterministic deviation.

    Deterministic joint policies always factor into product policies, so
    ``require_product`` only documents the contract; it is accepted for
    interface symmetry with mixed-strategy solvers.
    """
    R, game = _rewards_for(game_like)
    choices, V = deterministic_profile_values(game_like)
    N = game.num_agents
    ok = np.ones(V.shape[1:], dtype=bool)
    for i in range(N):
        best = V[i].max(axis=i, keepdims=True)
        ok &= V[i] >= best - tol
    results = []
    P3 = game.dense_kernel()
    rows = np.arange(game.num_states)
    for k in zip(*np.nonzero(ok)):
        actions = [choices[i][k[i]] for i in range(N)]
        policy = ProductPolicy.deterministic(game, actions)
        joint = np.ravel_multi_index(tuple(np.array(a) for a in actions), game.action_counts)
        gains = V[(slice(None),) + tuple(k)]
        chain = P3[rows, joint]
        bias = _poisson_bias(chain, R[0, rows, joint], float(gains[0]))
        results.append(OracleResult(policy, np.array(gains), bias, 1, 0.0, True))
    return results


# --------------------------------------------------------------------------
# best responses and the generalized dual


def _mdp_graph(kernel: sp.csr_matrix, allowed: np.ndarray) -> sp.csr_matrix:
    S, A = allowed.shape
    sel = np.flatnonzero(allowed.ravel())
    W = sp.csr_matrix((np.ones(sel.size), (sel // A, sel)), shape=(S, S * A))
    return (W @ (kernel > 0).astype(float)).tocsr()


def reachable_states(kernel: sp.csr_matrix, allowed: np.ndarray, start: int) -> np.ndarray:
    """Sorted states reachable from ``start`` under some allowed action sequence."""
    order = breadth_first_order(_mdp_graph(kernel, allowed), start, directed=True, return_predecessors=False)
    return np.sort(order)


def _limit_matrix(P: np.ndarray) -> np.ndarray:
    """Cesaro limit P* of a stochastic matrix, built from its recurrent classes."""
    n = len(P)
    classes = recurrent_classes(P)
    star = np.zeros((n, n))
    recurrent = np.concatenate(classes)
    transient = np.setdiff1d(np.arange(n), recurrent)
    pis = []
    for cls in classes:
        sub = P[np.ix_(cls, cls)]
        M = sub.T - np.eye(len(cls))
        M[-1, :] = 1.0
        rhs = np.zeros(len(cls))
        rhs[-1] = 1.0
        pi = np.linalg.solve(M, rhs)
        star[np.ix_(cls, cls)] = pi[None, :]
        pis.append(pi)
    if transient.size:
        Q = P[np.ix_(transient, transient)]
        fundamental = np.linalg.inv(np.eye(transient.size) - Q)
        for cls, pi in zip(classes, pis):
            absorb = fundamental @ P[np.ix_(transient, cls)].sum(axis=1)
            star[np.ix_(transient, cls)] = absorb[:, None] * pi[None, :]
    return star


def multichain_policy_iteration(
    reward: np.ndarray, kernel: sp.csr_matrix, allowed: np.ndarray, max_iter: int = 1000
) -> RviSolution:
    """Exact average-reward policy iteration for a possibly multichain MDP.

    Evaluation uses the limit matrix P* (gain g = P* r) and the deviation
    matrix (bias h = (I - P + P*)^-1 (I - P*) r).  Improvement first raises
    the gain through P g and only then the bias, keeping the current action
    on ties, so the iteration terminates with state-dependent optimal gains.
    Dense in the number of states; meant for best responses on the reachable
    part of a game.
    """
    S, A = reward.shape
    P3 = kernel.toarray().reshape(S, A, S)
    r = np.where(allowed, reward, -np.inf)
    rows = np.arange(S)
    act = np.argmax(allowed, axis=1)
    eye = np.eye(S)

    def close(x, best):
        return x >= best - TIE_TOL * np.maximum(1.0, np.abs(best))

    for it in range(1, max_iter + 1):
        P = P3[rows, act]
        rd = reward[rows, act]
        star = _limit_matrix(P)
        g = star @ rd
        h = np.linalg.solve(eye - P + star, rd - star @ rd)
        pg = np.where(allowed, P3 @ g, -np.inf)
        best_g = pg.max(axis=1)
        in_gain = close(pg, best_g[:, None])
        new = act.copy()
        keep = in_gain[rows, act]
        new[~keep] = np.argmax(in_gain[~keep], axis=1)
        if np.array_equal(new, act):
            q = np.where(in_gain, r + P3 @ h, -np.inf)
            best_q = q.max(axis=1)
            keep = close(q[rows, act], best_q)
            new[~keep] = _greedy(q[~keep])
            if np.array_equal(new, act):
                return RviSolution(h, float(g[0]), act, it, 0.0, True, g)
        act = new
    return RviSolution(h, float(g[0]), act, max_iter, np.inf, False, g)


def best_response(
    game: ConstrainedMarkovGame,
    lam,
    agent: int,
    policy: ProductPolicy,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    initial_state: Optional[int] = None,
) -> RviSolution:
    """Agent's optimal Lagrangian gain against the others' fixed part of ``policy``.

    With ``initial_state`` only the states reachable from it are solved, by
    multichain policy iteration, and ``state_gain`` is NaN elsewhere.
    """
    lgame = build_lagrangian_game(game, lam)
    others = marginal_without(policy, agent)  # (S, A_-i)
    r = agent_view(game, lgame.augmented_reward[agent], agent)  # (S, A_i, A_-i)
    r_i = np.einsum("sak,sk->sa", r, others)
    cc = game.control_cost
    if cc is not None:
        own = np.where(game.allowed[agent], cc.agent_action_adjustment(agent), 0.0)
        rest = sum(
            (cc.agent_policy_adjustment(policy, j) for j in range(game.num_agents) if j != agent),
            np.zeros(game.num_states),
        )
        r_i = r_i + own + rest[:, None]
    K_i = kernel_given_others(game, policy, agent)
    allowed = game.allowed[agent]
    if initial_state is None:
        sol = relative_value_iteration(r_i, K_i, allowed, tol, max_iter)
    else:
        keep = reachable_states(K_i, allowed, initial_state)
        sub = multichain_policy_iteration(r_i[keep], _restrict(K_i, keep, allowed.shape[1]), allowed[keep])
        S = game.num_states
        bias, state_gain = np.zeros(S), np.full(S, np.nan)
        greedy = np.zeros(S, dtype=int)
        bias[keep], state_gain[keep], greedy[keep] = sub.bias, sub.state_gain, sub.greedy
        sol = RviSolution(bias, float(state_gain[initial_state]), greedy, sub.iterations, sub.residual, sub.converged, state_gain)
    if not sol.converged:
        raise OracleError(f"best response of agent {agent} did not converge (residual {sol.residual:.3g})")
    return sol


def generalized_dual(game: ConstrainedMarkovGame, lam, agent: int, policy: ProductPolicy,
                     tol: float = 1e-10, initial_state: Optional[int] = None) -> float:
    """d_i(lam, pi_-i): best attainable Lagrangian value for ``agent`` (its own part of policy is ignored).

    With ``initial_state`` the value is the optimal gain from that state,
    which is what multichain games such as the grid world need.
    """
    sol = best_response(game, lam, agent, policy, tol, initial_state=initial_state)
    return sol.gain if initial_state is None else float(sol.state_gain[initial_state])


def best_response_residual(lgame: LagrangianGame, policy: ProductPolicy, agent: int,
                           tol: float = 1e-10, initial_state: Optional[int] = None) -> float:
    d = generalized_dual(lgame.base, lgame.lam, agent, policy, tol, initial_state)
    return d - float(lagrangian_values(lgame, policy, initial_state)[agent])


def danskin_check(
    game: ConstrainedMarkovGame,
    lambda_k,
    lambda_plus=None,
    oracle_policy: Optional[ProductPolicy] = None,
    agent: int = 0,
    slack: float = 1e-8,
    initial_state: Optional[int] = None,
) -> DanskinReport:
    """Check d_i(lam+, pi_-i) - d_i(lam_k, pi_-i) >= (lam+ - lam_k)^T (U(pi) - b)."""
    lam_k = np.asarray(lambda_k, dtype=float).reshape(-1)
    lam_p = np.zeros_like(lam_k) if lambda_plus is None else np.asarray(lambda_plus, dtype=float).reshape(-1)
    if oracle_policy is None:
        oracle_policy = solve_identical_interest(build_lagrangian_game(game, lam_k), tol=1e-11).policy
    d = lambda lam: generalized_dual(game, lam, agent, oracle_policy, initial_state=initial_state)
    lhs = d(lam_p) - d(lam_k)
    U = evaluate_stationary(game, oracle_policy, initial_state).gain_per_constraint
    rhs = float((lam_p - lam_k) @ (U - game.thresholds))
    return DanskinReport(agent, lam_k, lam_p, float(lhs), rhs, bool(lhs >= rhs - slack))


# --------------------------------------------------------------------------
# pluggable oracle

Oracle = Callable[[LagrangianGame, Optional[np.ndarray]], OracleResult]


def make_oracle(kind: str = "rvi", tol: float = 1e-9, max_iter: int = 100_000, sweeps: int = 20) -> Oracle:
    """Oracle callable ``(lgame, warm_start) -> OracleResult``.

    Other solvers plug in by providing a callable with the same signature.
    """
    if kind == "rvi":
        return lambda lgame, warm=None: solve_identical_interest(lgame, tol, max_iter, warm)
    if kind == "optimistic_pi":
        return lambda lgame, warm=None: optimistic_policy_iteration(lgame, tol, max_iter, sweeps, warm_start=warm)
    if kind == "brute_force":
        def _bf(lgame, warm=None):
            found = brute_force_ne(lgame)
            if not found:
                raise OracleError("no deterministic stationary NE exists for this Lagrangian game")
            return found[0]
        return _bf
    raise ValueError(f"unknown oracle kind {kind!r}")
