"""Lagrangian games and the projected dual-descent multiplier update."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .game_core import (
    ConstrainedMarkovGame,
    ProductPolicy,
    control_adjustment,
    evaluate_stationary,
    point_mass_control,
)


@dataclass(frozen=True, eq=False)
class Multipliers:
    values: np.ndarray
    step_size: float = 0.1

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if (v < 0).any():
            raise ValueError(f"multipliers must be nonnegative, got {v}")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def l1(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True, eq=False)
class LagrangianGame:
    """Unconstrained game with per-step reward r_i + sum_j lam_j (c_j - b_j).

    The base game's policy-dependent control cost (if any) is carried along
    unchanged; ``action_reward`` folds its point-mass value in for solvers
    that search over deterministic actions.
    """

    base: ConstrainedMarkovGame
    lam: np.ndarray
    augmented_reward: np.ndarray  # (N, S, |A|)

    @property
    def num_states(self) -> int:
        return self.base.num_states

    def action_reward(self) -> np.ndarray:
        pm = point_mass_control(self.base)
        if pm is None:
            return self.augmented_reward
        return self.augmented_reward + pm[None]

    def is_identical_interest(self, tol: float = 1e-12) -> bool:
        r = self.action_reward()
        mask = self.base.joint_allowed()
        return bool(np.all(np.abs(r - r[:1])[:, mask] <= tol))


def build_lagrangian_game(game: ConstrainedMarkovGame, lam) -> LagrangianGame:
    lam = np.asarray(lam.values if isinstance(lam, Multipliers) else lam, dtype=float).reshape(-1)
    if lam.size != game.num_constraints:
        raise ValueError(f"lambda has length {lam.size}, game has {game.num_constraints} constraints")
    if (lam < 0).any():
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    shaping = np.einsum("j,jsa->sa", lam, game.cost - game.thresholds[:, None, None])
    aug = game.reward + shaping[None]
    aug.flags.writeable = False
    lam = lam.copy()
    lam.flags.writeable = False
    return LagrangianGame(game, lam, aug)


def lagrangian_values(lgame: LagrangianGame, policy: ProductPolicy,
                      initial_state: Optional[int] = None) -> np.ndarray:
    """Per-agent average augmented reward L_i(pi, lam) of a stationary policy."""
    ev = evaluate_stationary(lgame.base, policy, initial_state)
    vals = np.einsum("isa,sa->i", lgame.augmented_reward, ev.occupation)
    if lgame.base.control_cost is not None:
        vals = vals + ev.state_distribution @ control_adjustment(lgame.base, policy)
    return vals


def dual_descent_step(lam: Multipliers, epoch_costs, thresholds, t0: Optional[int] = None) -> Multipliers:
    """lam_j <- [lam_j - (eta / T0) * sum_t (c_j(s^t, a^t) - b_j)]_+ over one epoch.

    ``epoch_costs`` is a (T0, m) array of per-step cost vectors.
    """
    costs = np.asarray(epoch_costs, dtype=float)
    if costs.ndim == 1:
        costs = costs[:, None]
    b = np.asarray(thresholds, dtype=float).reshape(-1)
    if costs.shape[0] == 0:
        raise ValueError("epoch_costs is empty")
    if t0 is not None and costs.shape[0] != t0:
        raise ValueError(f"expected {t0} steps of costs, got {costs.shape[0]}")
    if costs.shape[1] != b.size or lam.values.size != b.size:
        raise ValueError(
            f"length mismatch: costs have {costs.shape[1]} entries, thresholds {b.size}, "
            f"multipliers {lam.values.size}"
        )
    T0 = costs.shape[0]
    surplus = (costs - b).sum(axis=0)
    new = np.maximum(0.0, lam.values - (lam.step_size / T0) * surplus)
    return Multipliers(new, lam.step_size)
