"""Finite constrained Markov games, product policies and average-reward evaluation.

Joint actions are enumerated row-major over agents, i.e. joint index
``np.ravel_multi_index((a_1, ..., a_N), action_counts)``.  The transition
kernel is stored as a sparse ``(S * |A|, S)`` matrix whose row
``s * |A| + a`` is ``P(. | s, a)``.

A game may carry an optional ``control_cost`` object whose contribution to
the per-step reward depends on the policy being played (the KL control cost
of the grid-world environment is the only one shipped).  It must provide::

    agent_action_adjustment(i) -> (S, |A_i|)    # reward shift of a point-mass action
    agent_policy_adjustment(policy, i) -> (S,)  # reward shift of agent i's mixed policy

Both shifts are added to *every* agent's reward.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

ROW_SUM_TOL = 1e-12
POLICY_SUM_TOL = 1e-12


class MultichainError(ValueError):
    """Raised when an induced chain has more than one recurrent class."""

    def __init__(self, state_a: int, state_b: int, num_classes: int):
        self.states = (state_a, state_b)
        self.num_classes = num_classes
        super().__init__(
            f"chain has {num_classes} recurrent classes; states {state_a} and "
            f"{state_b} lie in different classes, average reward depends on the start"
        )


@dataclass(frozen=True, eq=False)
class ConstrainedMarkovGame:
    num_states: int
    action_counts: tuple[int, ...]
    allowed: tuple[np.ndarray, ...]  # per agent, bool (S, |A_i|)
    reward: np.ndarray  # (N, S, |A|)
    cost: np.ndarray  # (m, S, |A|)
    thresholds: np.ndarray  # (m,)
    kernel: sp.csr_matrix  # (S * |A|, S)
    control_cost: Any = None
    name: str = ""

    def __post_init__(self):
        counts = tuple(int(c) for c in self.action_counts)
        object.__setattr__(self, "action_counts", counts)
        allowed = tuple(np.asarray(m, dtype=bool) for m in self.allowed)
        reward = np.asarray(self.reward, dtype=float)
        cost = np.asarray(self.cost, dtype=float)
        thresholds = np.asarray(self.thresholds, dtype=float).reshape(-1)
        if cost.size == 0:
            cost = cost.reshape(0, self.num_states, int(np.prod(counts)))
        kernel = sp.csr_matrix(self.kernel, dtype=float)
        kernel.sort_indices()
        for arr in (*allowed, reward, cost, thresholds, kernel.data, kernel.indices, kernel.indptr):
            arr.flags.writeable = False
        object.__setattr__(self, "allowed", allowed)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "kernel", kernel)

        S, A, N = self.num_states, self.num_joint_actions, self.num_agents
        if N < 2:
            raise ValueError(f"need at least 2 agents, got {N}")
        if len(allowed) != N or any(m.shape != (S, c) for m, c in zip(allowed, counts)):
            raise ValueError("allowed-action masks must have shape (S, |A_i|) per agent")
        if reward.shape != (N, S, A):
            raise ValueError(f"reward shape {reward.shape} != {(N, S, A)}")
        if cost.shape != (thresholds.size, S, A):
            raise ValueError(f"cost shape {cost.shape} != {(thresholds.size, S, A)}")
        if kernel.shape != (S * A, S):
            raise ValueError(f"kernel shape {kernel.shape} != {(S * A, S)}")

    @property
    def num_agents(self) -> int:
        return len(self.action_counts)

    @property
    def num_constraints(self) -> int:
        return int(self.thresholds.size)

    @property
    def num_joint_actions(self) -> int:
        return int(np.prod(self.action_counts))

    def joint_allowed(self) -> np.ndarray:
        """Bool (S, |A|) mask: a joint action is allowed iff every component is."""
        mask = np.ones((self.num_states,) + self.action_counts, dtype=bool)
        for i, m in enumerate(self.allowed):
            shape = [self.num_states] + [1] * self.num_agents
            shape[i + 1] = self.action_counts[i]
            mask = mask & m.reshape(shape)
        return mask.reshape(self.num_states, -1)

    def joint_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(actions), self.action_counts))

    def split_joint(self, joint: int) -> tuple[int, ...]:
        return tuple(int(a) for a in np.unravel_index(joint, self.action_counts))

    def kernel_row(self, state: int, joint: int) -> np.ndarray:
        return self.kernel.getrow(state * self.num_joint_actions + joint).toarray().ravel()

    def dense_kernel(self) -> np.ndarray:
        """Kernel as a dense (S, |A|, S) array; only sensible for small games."""
        return self.kernel.toarray().reshape(self.num_states, self.num_joint_actions, self.num_states)

    def bounds(self) -> tuple[float, float]:
        """The constants R = max |r| and B = max |c_j - b_j|."""
        R = float(np.abs(self.reward).max()) if self.reward.size else 0.0
        if self.num_constraints:
            B = float(np.abs(self.cost - self.thresholds[:, None, None]).max())
        else:
            B = 0.0
        return R, B

    def with_thresholds(self, thresholds) -> "ConstrainedMarkovGame":
        return ConstrainedMarkovGame(
            self.num_states, self.action_counts, self.allowed, self.reward, self.cost,
            np.asarray(thresholds, dtype=float), self.kernel, self.control_cost, self.name,
        )


@dataclass(frozen=True, eq=False)
class ProductPolicy:
    """Per-agent state-conditional action distributions, ``probs[i][s, a_i]``."""

    probs: tuple[np.ndarray, ...]

    def __post_init__(self):
        probs = tuple(np.array(p, dtype=float) for p in self.probs)
        for p in probs:
            if p.ndim != 2:
                raise ValueError("each agent's table must be 2-D (S, |A_i|)")
            if (p < 0).any():
                raise ValueError("negative action probability")
            if np.abs(p.sum(axis=1) - 1.0).max() > POLICY_SUM_TOL * max(1, p.shape[1]):
                raise ValueError("action distribution does not sum to 1")
            p.flags.writeable = False
        if len({p.shape[0] for p in probs}) != 1:
            raise ValueError("agents disagree on the number of states")
        object.__setattr__(self, "probs", probs)

    @property
    def num_agents(self) -> int:
        return len(self.probs)

    @property
    def num_states(self) -> int:
        return self.probs[0].shape[0]

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(p.shape[1] for p in self.probs)

    @classmethod
    def uniform(cls, game: ConstrainedMarkovGame) -> "ProductPolicy":
        probs = []
        for m in game.allowed:
            w = m.astype(float)
            probs.append(w / w.sum(axis=1, keepdims=True))
        return cls(tuple(probs))

    @classmethod
    def deterministic(cls, game: ConstrainedMarkovGame, actions) -> "ProductPolicy":
        """``actions[i][s]`` is agent i's action at state s."""
        probs = []
        for i, acts in enumerate(actions):
            p = np.zeros((game.num_states, game.action_counts[i]))
            p[np.arange(game.num_states), np.asarray(acts, dtype=int)] = 1.0
            probs.append(p)
        return cls(tuple(probs))

    def joint(self) -> np.ndarray:
        """Joint action distribution (S, |A|), row-major over agents."""
        out = self.probs[0]
        for p in self.probs[1:]:
            out = (out[:, :, None] * p[:, None, :]).reshape(out.shape[0], -1)
        return out

    def is_deterministic(self) -> bool:
        return all(np.all((p == 0) | (p == 1)) for p in self.probs)

    def replace(self, agent: int, table) -> "ProductPolicy":
        probs = list(self.probs)
        probs[agent] = np.asarray(table, dtype=float)
        return ProductPolicy(tuple(probs))

    def check_against(self, game: ConstrainedMarkovGame) -> None:
        if self.action_counts != game.action_counts or self.num_states != game.num_states:
            raise ValueError(
                f"policy dimensions {(self.num_states, self.action_counts)} do not match "
                f"game {(game.num_states, game.action_counts)}"
            )
        for i, (p, m) in enumerate(zip(self.probs, game.allowed)):
            if (p[~m] > 0).any():
                s, a = np.argwhere((p > 0) & ~m)[0]
                raise ValueError(f"agent {i} puts mass on disallowed action {a} at state {s}")


@dataclass(frozen=True)
class EpochPolicySequence:
    policies: tuple[ProductPolicy, ...]
    epoch_length: int

    def at(self, t: int) -> ProductPolicy:
        """Stationary policy in force at time step t."""
        return self.policies[t // self.epoch_length]

    def __len__(self) -> int:
        return len(self.policies)


@dataclass(frozen=True, eq=False)
class StationaryEvaluation:
    occupation: np.ndarray  # (S, |A|)
    state_distribution: np.ndarray  # (S,)
    gain_per_agent: np.ndarray  # (N,)
    gain_per_constraint: np.ndarray  # (m,)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    R: float = 0.0
    B: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_game(game: ConstrainedMarkovGame) -> ValidationReport:
    report = ValidationReport()
    S, A = game.num_states, game.num_joint_actions
    K = game.kernel
    if (K.data < 0).any():
        rows = np.repeat(np.arange(K.shape[0]), np.diff(K.indptr))[K.data < 0]
        for r in np.unique(rows):
            report.violations.append(f"kernel row (s={r // A}, a={r % A}) has a negative entry")
    sums = np.asarray(K.sum(axis=1)).ravel()
    for r in np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL):
        report.violations.append(f"kernel row (s={r // A}, a={r % A}) sums to {sums[r]!r}, not 1")
    for i, m in enumerate(game.allowed):
        for s in np.flatnonzero(~m.any(axis=1)):
            report.violations.append(f"agent {i} has no allowed action at state {s}")
    R, B = game.bounds()
    if not np.isfinite(R):
        report.violations.append("reward table is not bounded (R is not finite)")
    if not np.isfinite(B):
        report.violations.append("cost table is not bounded (B is not finite)")
    report.R, report.B = R, B
    return report


def induced_chain(game: ConstrainedMarkovGame, policy: ProductPolicy) -> np.ndarray:
    """State transition matrix under a stationary product policy."""
    policy.check_against(game)
    joint = policy.joint()
    S, A = game.num_states, game.num_joint_actions
    # block-diagonal weights: row s picks rows (s, a) of the kernel with mass joint[s, a]
    W = sp.csr_matrix(
        (joint.ravel(), np.arange(S * A), np.arange(0, S * A + 1, A)), shape=(S, S * A)
    )
    return (W @ game.kernel).toarray()


def recurrent_classes(chain) -> list[np.ndarray]:
    """Closed communicating classes of a stochastic matrix, ordered by smallest state."""
    graph = sp.csr_matrix(np.asarray(chain) > 0) if not sp.issparse(chain) else (chain > 0).tocsr()
    n_comp, labels = connected_components(graph, directed=True, connection="strong")
    coo = graph.tocoo()
    leaves = np.zeros(n_comp, dtype=bool)
    leaves[labels[coo.row][labels[coo.row] != labels[coo.col]]] = True
    classes = [np.flatnonzero(labels == c) for c in range(n_comp) if not leaves[c]]
    return sorted(classes, key=lambda c: c[0])


def stationary_distribution(chain) -> np.ndarray:
    """Unique stationary distribution of a unichain stochastic matrix.

    Solved as the linear system mu^T (P - I) = 0 with one balance equation
    replaced by normalisation, which is exact for periodic chains too.
    """
    P = np.asarray(chain.toarray() if sp.issparse(chain) else chain, dtype=float)
    n = P.shape[0]
    if P.shape != (n, n):
        raise ValueError("chain must be square")
    classes = recurrent_classes(P)
    if len(classes) > 1:
        raise MultichainError(int(classes[0][0]), int(classes[1][0]), len(classes))
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    mu = np.linalg.solve(M, rhs)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def limiting_distribution(chain, initial_state: int) -> np.ndarray:
    """Cesaro-limit state distribution of a possibly multichain matrix from a start state.

    Mixes the stationary distributions of the recurrent classes by the
    probability of being absorbed into each from ``initial_state``.
    """
    P = np.asarray(chain.toarray() if sp.issparse(chain) else chain, dtype=float)
    n = P.shape[0]
    classes = recurrent_classes(P)
    if len(classes) == 1:
        return stationary_distribution(P)
    recurrent = np.concatenate(classes)
    transient = np.setdiff1d(np.arange(n), recurrent)
    absorb = np.zeros(len(classes))
    for k, cls in enumerate(classes):
        if initial_state in cls:
            absorb[k] = 1.0
    if transient.size and initial_state in transient:
        Q = P[np.ix_(transient, transient)]
        row = np.flatnonzero(transient == initial_state)[0]
        fundamental_row = np.linalg.solve((np.eye(transient.size) - Q).T, np.eye(transient.size)[row])
        for k, cls in enumerate(classes):
            absorb[k] = fundamental_row @ P[np.ix_(transient, cls)].sum(axis=1)
    mu = np.zeros(n)
    for k, cls in enumerate(classes):
        if absorb[k] > 0:
            mu[cls] += absorb[k] * stationary_distribution(P[np.ix_(cls, cls)])
    return mu / mu.sum()


def control_adjustment(game: ConstrainedMarkovGame, policy: ProductPolicy) -> np.ndarray:
    """Per-state reward shift from the game's policy-dependent control cost (zeros if none)."""
    if game.control_cost is None:
        return np.zeros(game.num_states)
    return sum(
        game.control_cost.agent_policy_adjustment(policy, i) for i in range(game.num_agents)
    )


def evaluate_stationary(
    game: ConstrainedMarkovGame, policy: ProductPolicy, initial_state: Optional[int] = None
) -> StationaryEvaluation:
    """Average reward and cost of a stationary policy from its occupation measure.

    Without ``initial_state`` the induced chain must be unichain (values do
    not depend on the start); with it, multichain chains are evaluated from
    that start state.
    """
    chain = induced_chain(game, policy)
    if initial_state is None:
        mu = stationary_distribution(chain)
    else:
        mu = limiting_distribution(chain, initial_state)
    occ = mu[:, None] * policy.joint()
    gains = np.einsum("isa,sa->i", game.reward, occ)
    if game.control_cost is not None:
        gains = gains + mu @ control_adjustment(game, policy)
    costs = np.einsum("jsa,sa->j", game.cost, occ)
    return StationaryEvaluation(occ, mu, gains, costs)


def marginal_without(policy: ProductPolicy, agent: int) -> np.ndarray:
    """Distribution over the other agents' joint actions, (S, |A_-i|) row-major."""
    if not 0 <= agent < policy.num_agents:
        raise IndexError(f"agent {agent} out of range for {policy.num_agents} agents")
    others = [p for j, p in enumerate(policy.probs) if j != agent]
    out = others[0]
    for p in others[1:]:
        out = (out[:, :, None] * p[:, None, :]).reshape(out.shape[0], -1)
    return out


def compose_with(policy: ProductPolicy, agent: int, own: np.ndarray) -> np.ndarray:
    """Joint distribution (S, |A|) of ``own`` for ``agent`` times the others' marginal.

    The product is taken in agent order, so ``compose_with(pi, i, pi.probs[i])``
    equals ``pi.joint()`` bitwise.
    """
    if not 0 <= agent < policy.num_agents:
        raise IndexError(f"agent {agent} out of range for {policy.num_agents} agents")
    return policy.replace(agent, own).joint()


def agent_view(game: ConstrainedMarkovGame, table: np.ndarray, agent: int) -> np.ndarray:
    """Reshape a (..., S, |A|) table so agent's action is axis -2 and the others' joint axis -1."""
    lead = table.shape[:-2]
    S = game.num_states
    t = table.reshape(lead + (S,) + game.action_counts)
    t = np.moveaxis(t, len(lead) + 1 + agent, len(lead) + 1)
    return t.reshape(lead + (S, game.action_counts[agent], -1))


def kernel_given_others(game: ConstrainedMarkovGame, policy: ProductPolicy, agent: int) -> sp.csr_matrix:
    """Single-agent kernel (S * |A_i|, S) with the other agents' actions marginalised out."""
    S, A = game.num_states, game.num_joint_actions
    Ai = game.action_counts[agent]
    others = marginal_without(policy, agent)  # (S, A_-i)
    # joint index of (s, a_i, a_-i) laid out in agent_view order
    joint_idx = agent_view(game, np.arange(S * A).reshape(S, A), agent)  # (S, Ai, A_-i)
    rows = np.repeat(np.arange(S * Ai), others.shape[1])
    weights = np.broadcast_to(others[:, None, :], joint_idx.shape).ravel()
    W = sp.csr_matrix((weights, (rows, joint_idx.ravel())), shape=(S * Ai, S * A))
    return (W @ game.kernel).tocsr()


def point_mass_control(game: ConstrainedMarkovGame) -> Optional[np.ndarray]:
    """Reward shift (S, |A|) of playing each joint action deterministically, or None."""
    cc = game.control_cost
    if cc is None:
        return None
    S = game.num_states
    total = np.zeros((S,) + game.action_counts)
    for i in range(game.num_agents):
        shape = [S] + [1] * game.num_agents
        shape[i + 1] = game.action_counts[i]
        adj = np.where(game.allowed[i], cc.agent_action_adjustment(i), 0.0)
        total = total + adj.reshape(shape)
    return total.reshape(S, -1)
