"""Game constructors: the Stag-Hare-Rest grid world and random test fixtures."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .game_core import ConstrainedMarkovGame, ProductPolicy, evaluate_stationary

# action index -> (d_row, d_col); up, down, left, right
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
MOVE_NAMES = ("up", "down", "left", "right")


def kl_control_cost(p, q) -> float:
    """KL(p || q) with the 0 * log(0 / q) = 0 convention."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    if (q[support] <= 0).any():
        raise ValueError("policy puts mass where the natural distribution has none")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


@dataclass(frozen=True, eq=False)
class KLControlCost:
    """Per-step reward shift ``sign * weight * sum_i KL(next-cell dist of pi_i || natural_i)``.

    ``natural[i][s, a]`` is the natural probability of the cell that action
    ``a`` leads agent ``i`` to from joint state ``s``.  Distinct allowed actions
    must reach distinct cells, so the policy-induced next-cell distribution is
    the action distribution itself; the natural "stay" mass only shows up
    through the normalisation of ``natural`` (rows sum to less than one).
    """

    natural: tuple[np.ndarray, ...]
    weight: float = 1.0
    sign: str = "penalty"

    def __post_init__(self):
        if self.sign not in ("penalty", "bonus"):
            raise ValueError(f"kl sign must be 'penalty' or 'bonus', got {self.sign!r}")
        if self.weight < 0:
            raise ValueError("kl weight must be nonnegative")
        nat = tuple(np.asarray(n, dtype=float) for n in self.natural)
        for n in nat:
            n.flags.writeable = False
        object.__setattr__(self, "natural", nat)

    @property
    def _scale(self) -> float:
        return -self.weight if self.sign == "penalty" else self.weight

    def agent_action_adjustment(self, agent: int) -> np.ndarray:
        q = self.natural[agent]
        with np.errstate(divide="ignore"):
            kl = np.where(q > 0, -np.log(np.where(q > 0, q, 1.0)), np.inf)
        return self._scale * kl

    def agent_policy_adjustment(self, policy: ProductPolicy, agent: int) -> np.ndarray:
        p = policy.probs[agent]
        q = self.natural[agent]
        if ((p > 0) & (q <= 0)).any():
            raise ValueError(f"agent {agent} policy leaves the natural support")
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0) / np.where(q > 0, q, 1.0)), 0.0)
        return self._scale * terms.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": "kl",
            "weight": self.weight,
            "sign": self.sign,
            "natural": [n.tolist() for n in self.natural],
        }


@dataclass(frozen=True)
class ShrConfig:
    """Stag-Hare-Rest parameters.  Cells are labelled 1..side**2 row-major."""

    side: int = 5
    hare_cells: tuple[int, ...] = (1, 5, 21, 25)
    stag_cells: tuple[int, ...] = (13,)
    rest_cells: tuple[int, ...] = (2,)
    stag_reward: float = 20.0
    hare_reward: float = 2.0
    rest_threshold: float = 0.5
    kl_weight: float = 1.0
    kl_sign: str = "penalty"
    natural_stay_prob: float = 0.9

    def validate(self) -> None:
        n = self.side * self.side
        if self.side < 2:
            raise ValueError("grid side must be at least 2")
        for name in ("hare_cells", "stag_cells", "rest_cells"):
            cells = getattr(self, name)
            if any(not 1 <= c <= n for c in cells):
                raise ValueError(f"{name} {cells} outside cells 1..{n}")
        if not 0 < self.rest_threshold < 2:
            raise ValueError("rest threshold must lie in (0, 2)")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")
        if self.kl_sign not in ("penalty", "bonus"):
            raise ValueError("kl_sign must be 'penalty' or 'bonus'")
        if not 0 <= self.natural_stay_prob < 1:
            raise ValueError("natural_stay_prob must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("hare_cells", "stag_cells", "rest_cells"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShrConfig":
        d = dict(d)
        for k in ("hare_cells", "stag_cells", "rest_cells"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def shr_state(cell_1: int, cell_2: int, side: int = 5) -> int:
    """Joint state index of 1-based cells."""
    return side * side * (cell_1 - 1) + (cell_2 - 1)


def shr_cells(state: int, side: int = 5) -> tuple[int, int]:
    n = side * side
    return state // n + 1, state % n + 1


def grid_step(cell: int, action: int, side: int = 5) -> Optional[int]:
    """Cell reached from a 1-based cell, or None if the move leaves the grid."""
    r, c = divmod(cell - 1, side)
    dr, dc = MOVES[action]
    r, c = r + dr, c + dc
    if 0 <= r < side and 0 <= c < side:
        return r * side + c + 1
    return None


def build_shr(config: ShrConfig = ShrConfig()) -> ConstrainedMarkovGame:
    config.validate()
    side = config.side
    n = side * side
    S = n * n
    cells = np.arange(1, n + 1)
    step = np.array([[grid_step(c, a, side) or c for a in range(4)] for c in cells])  # (n, 4)
    can = np.array([[grid_step(c, a, side) is not None for a in range(4)] for c in cells])

    c1 = np.repeat(cells, n)  # agent 1 cell per joint state
    c2 = np.tile(cells, n)
    hare = lambda c: np.isin(c, config.hare_cells).astype(float)
    stag = lambda c: np.isin(c, config.stag_cells).astype(float)
    rest = lambda c: np.isin(c, config.rest_cells).astype(float)

    r_state = config.stag_reward * stag(c1) * stag(c2) + config.hare_reward * (hare(c1) + hare(c2))
    cost_state = rest(c1) + rest(c2)
    reward = np.broadcast_to(r_state[None, :, None], (2, S, 16)).copy()
    cost = np.broadcast_to(cost_state[None, :, None], (1, S, 16)).copy()

    allowed1 = can[c1 - 1]
    allowed2 = can[c2 - 1]
    # disallowed moves keep the agent in place so every kernel row stays a distribution
    nxt1 = step[c1 - 1]  # (S, 4)
    nxt2 = step[c2 - 1]
    nxt = (nxt1[:, :, None] - 1) * n + (nxt2[:, None, :] - 1)  # (S, 4, 4)
    kernel = sp.csr_matrix(
        (np.ones(S * 16), (np.arange(S * 16), nxt.ravel())), shape=(S * 16, S)
    )

    neighbours = can.sum(axis=1)  # per cell
    move_prob = (1.0 - config.natural_stay_prob) / neighbours  # per cell
    nat_cell = np.where(can, move_prob[:, None], 0.0)  # (n, 4)
    natural = (nat_cell[c1 - 1], nat_cell[c2 - 1])
    control = None
    if config.kl_weight > 0:
        control = KLControlCost(natural, config.kl_weight, config.kl_sign)
    return ConstrainedMarkovGame(
        num_states=S,
        action_counts=(4, 4),
        allowed=(allowed1, allowed2),
        reward=reward,
        cost=cost,
        thresholds=np.array([config.rest_threshold]),
        kernel=kernel,
        control_cost=control,
        name="shr",
    )


def natural_next_cell_distribution(cell: int, side: int = 5, stay_prob: float = 0.9) -> dict[int, float]:
    """Natural drift of one agent: stay with ``stay_prob``, else uniform over neighbours."""
    nbrs = [c for a in range(4) if (c := grid_step(cell, a, side)) is not None]
    out = {cell: stay_prob}
    for c in nbrs:
        out[c] = (1.0 - stay_prob) / len(nbrs)
    return out


def shr_occupancy_grids(state_counts: np.ndarray, side: int = 5) -> np.ndarray:
    """Per-agent cell visit counts (2, side, side) from joint-state counts."""
    n = side * side
    joint = np.asarray(state_counts).reshape(n, n)
    return np.stack([joint.sum(axis=1), joint.sum(axis=0)]).reshape(2, side, side)


@dataclass(frozen=True)
class ChainGameParams:
    num_states: int = 3
    action_counts: tuple[int, ...] = (2, 2)
    num_constraints: int = 1
    identical_interest: bool = True
    seed: int = 0
    slater_margin: float = 0.1


def build_chain_game(params: ChainGameParams) -> tuple[ConstrainedMarkovGame, ProductPolicy]:
    """Random unichain game plus the planted strictly-feasible policy.

    Kernels have full support (hence unichain and aperiodic); rewards and
    costs are uniform on [-1, 1].  Thresholds are set to ``U(pi_dag) - margin``
    for a random deterministic product policy ``pi_dag``.
    """
    rng = np.random.default_rng(params.seed)
    S = params.num_states
    counts = tuple(params.action_counts)
    A = int(np.prod(counts))
    N = len(counts)
    kernel = rng.dirichlet(np.ones(S), size=S * A)
    if params.identical_interest:
        reward = np.broadcast_to(rng.uniform(-1, 1, size=(S, A)), (N, S, A)).copy()
    else:
        reward = rng.uniform(-1, 1, size=(N, S, A))
    m = params.num_constraints
    cost = rng.uniform(-1, 1, size=(m, S, A))
    allowed = tuple(np.ones((S, c), dtype=bool) for c in counts)
    planted_actions = [rng.integers(0, c, size=S) for c in counts]
    game = ConstrainedMarkovGame(S, counts, allowed, reward, cost, np.zeros(m), sp.csr_matrix(kernel),
                                 name=f"chain-{params.seed}")
    planted = ProductPolicy.deterministic(game, planted_actions)
    U = evaluate_stationary(game, planted).gain_per_constraint
    return game.with_thresholds(U - params.slater_margin), planted
