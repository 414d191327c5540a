"""Epoch rollouts, the primal-dual game dynamics loop and its run metrics."""
from __future__ import annotations

import bisect
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .game_core import ConstrainedMarkovGame, EpochPolicySequence, ProductPolicy
from .lagrangian import Multipliers, build_lagrangian_game, dual_descent_step
from .oracle import Oracle, OracleError, best_response_residual, make_oracle

log = logging.getLogger(__name__)

FEASIBILITY_TOL = 0.05
FINAL_WINDOW = 0.25


class OracleFailure(RuntimeError):
    def __init__(self, epoch: int, residual: float, detail: str = ""):
        self.epoch = epoch
        self.residual = residual
        msg = f"oracle failed at epoch {epoch} (residual {residual:.3g})"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass(frozen=True, eq=False)
class EpochRollout:
    epoch: int
    states: np.ndarray  # (T0,) s^t
    actions: np.ndarray  # (T0,) joint action index a^t
    rewards: np.ndarray  # (T0, N) base-game rewards
    costs: np.ndarray  # (T0, m)
    terminal_state: int

    @property
    def length(self) -> int:
        return len(self.states)


@dataclass(frozen=True, eq=False)
class MetricCurves:
    running_avg_cost: np.ndarray  # (T, m)
    running_avg_reward: np.ndarray  # (T, N)
    slackness_partial: np.ndarray  # (K,)
    occupancy_counts: np.ndarray  # (S,)
    max_lambda_norm: np.ndarray  # (K + 1,)


@dataclass(frozen=True)
class PlayConfig:
    K: int = 200
    T0: int = 100
    eta: float = 0.1
    lambda0: tuple[float, ...] = (5.0,)
    initial_state: Union[int, str] = 0  # state index or "random"
    oracle: str = "rvi"
    oracle_tol: float = 1e-9
    oracle_max_iter: int = 100_000
    oracle_sweeps: int = 20
    track_residuals: bool = False

    def __post_init__(self):
        if self.K < 1 or self.T0 < 1:
            raise ValueError("K and T0 must be at least 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if any(v < 0 for v in self.lambda0):
            raise ValueError("lambda0 must be nonnegative")


@dataclass(eq=False)
class EpisodeRecord:
    lambda_trace: np.ndarray  # (K + 1, m): lambda_0 .. lambda_K
    policies: EpochPolicySequence
    rollouts: list[EpochRollout]
    metrics: MetricCurves
    seed: int
    config: dict
    thresholds: np.ndarray
    B: float
    oracle_residuals: np.ndarray  # (K,) solver Bellman residual per epoch
    br_residuals: Optional[np.ndarray] = None  # (K, N) when tracked

    @property
    def K(self) -> int:
        return len(self.rollouts)

    @property
    def T0(self) -> int:
        return self.rollouts[0].length

    def costs(self) -> np.ndarray:
        return np.concatenate([r.costs for r in self.rollouts])

    def rewards(self) -> np.ndarray:
        return np.concatenate([r.rewards for r in self.rollouts])

    def states(self) -> np.ndarray:
        return np.concatenate([r.states for r in self.rollouts])


class _Sampler:
    """Inverse-CDF sampling tables for a game's kernel (built once per game)."""

    def __init__(self, game: ConstrainedMarkovGame):
        K = game.kernel
        self.A = game.num_joint_actions
        self.deterministic = bool(np.all(np.diff(K.indptr) == 1))
        if self.deterministic:
            self.next_state = K.indices.tolist()
        else:
            self.rows = []
            for r in range(K.shape[0]):
                lo, hi = K.indptr[r], K.indptr[r + 1]
                c = np.cumsum(K.data[lo:hi])
                self.rows.append((K.indices[lo:hi].tolist(), (c / c[-1]).tolist()))
        strides = np.cumprod((1,) + game.action_counts[::-1])[:-1][::-1]
        self.strides = [int(x) for x in strides]

    def step(self, state: int, joint: int, u: float) -> int:
        if self.deterministic:
            return self.next_state[state * self.A + joint]
        idx, cum = self.rows[state * self.A + joint]
        return idx[bisect.bisect_right(cum, u)]


def _policy_tables(policy: ProductPolicy) -> list[list[list[float]]]:
    tables = []
    for p in policy.probs:
        c = np.cumsum(p, axis=1)
        tables.append((c / c[:, -1:]).tolist())
    return tables


def rollout_epoch(
    game: ConstrainedMarkovGame,
    policy: ProductPolicy,
    s_init: int,
    T0: int,
    rng: np.random.Generator,
    epoch: int = 0,
    sampler: Optional[_Sampler] = None,
) -> EpochRollout:
    """Play ``policy`` for T0 steps from ``s_init``; each agent samples independently."""
    if T0 < 1:
        raise ValueError("T0 must be at least 1")
    policy.check_against(game)
    sampler = sampler or _Sampler(game)
    tables = _policy_tables(policy)
    N = game.num_agents
    u = rng.random((T0, N + 1)).tolist()
    states = [0] * T0
    actions = [0] * T0
    s = int(s_init)
    for t in range(T0):
        states[t] = s
        ut = u[t]
        joint = 0
        for i in range(N):
            joint += sampler.strides[i] * bisect.bisect_right(tables[i][s], ut[i])
        actions[t] = joint
        s = sampler.step(s, joint, ut[N])
    st = np.array(states)
    ac = np.array(actions)
    rewards = game.reward[:, st, ac].T.copy()
    costs = game.cost[:, st, ac].T.copy()
    return EpochRollout(epoch, st, ac, rewards, costs, s)


def episode_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for (initial-state draw, rollouts) of one episode."""
    children = np.random.SeedSequence(seed).spawn(2)
    return tuple(np.random.Generator(np.random.PCG64(c)) for c in children)


def compute_metrics(game: ConstrainedMarkovGame, lambda_trace: np.ndarray,
                    rollouts: list[EpochRollout]) -> MetricCurves:
    costs = np.concatenate([r.costs for r in rollouts])
    rewards = np.concatenate([r.rewards for r in rollouts])
    steps = np.arange(1, len(costs) + 1)[:, None]
    g = np.stack([r.costs.mean(axis=0) for r in rollouts]) - game.thresholds  # (K, m)
    terms = np.einsum("kj,kj->k", lambda_trace[:-1], g)
    slack = np.cumsum(terms) / np.arange(1, len(rollouts) + 1)
    states = np.concatenate([r.states for r in rollouts])
    occ = np.bincount(states, minlength=game.num_states)
    return MetricCurves(
        running_avg_cost=np.cumsum(costs, axis=0) / steps,
        running_avg_reward=np.cumsum(rewards, axis=0) / steps,
        slackness_partial=slack,
        occupancy_counts=occ,
        max_lambda_norm=np.maximum.accumulate(lambda_trace.sum(axis=1)),
    )


def play(
    game: ConstrainedMarkovGame,
    config: PlayConfig,
    seed: int = 0,
    oracle: Optional[Oracle] = None,
) -> EpisodeRecord:
    """Run K epochs of: build G(lam_k), solve it, roll out T0 steps, dual-descent update.

    The state trajectory is one unbroken path: every epoch starts where the
    previous one ended.
    """
    lam0 = np.asarray(config.lambda0, dtype=float)
    if lam0.size != game.num_constraints:
        raise ValueError(f"lambda0 has {lam0.size} entries, game has {game.num_constraints} constraints")
    oracle = oracle or make_oracle(config.oracle, config.oracle_tol, config.oracle_max_iter, config.oracle_sweeps)
    init_rng, rng = episode_rngs(seed)
    if config.initial_state == "random":
        s = int(init_rng.integers(game.num_states))
    else:
        s = int(config.initial_state)
        if not 0 <= s < game.num_states:
            raise ValueError(f"initial state {s} out of range")
    sampler = _Sampler(game)
    lam = Multipliers(lam0, config.eta)
    trace = [lam.values]
    policies, rollouts, residuals, br = [], [], [], []
    warm = None
    cached = None  # (lambda, result) of the last solve
    for k in range(config.K):
        if cached is not None and np.array_equal(cached[0], lam.values):
            res = cached[1]
        else:
            lgame = build_lagrangian_game(game, lam)
            try:
                res = oracle(lgame, warm)
            except OracleError as exc:
                raise OracleFailure(k, float("nan"), str(exc)) from exc
            if not res.converged:
                raise OracleFailure(k, res.residual)
            warm = res.bias
            cached = (lam.values, res)
        if config.track_residuals:
            lgame = build_lagrangian_game(game, lam)
            br.append([best_response_residual(lgame, res.policy, i, initial_state=s)
                       for i in range(game.num_agents)])
        roll = rollout_epoch(game, res.policy, s, config.T0, rng, epoch=k, sampler=sampler)
        lam = dual_descent_step(lam, roll.costs, game.thresholds, t0=config.T0)
        s = roll.terminal_state
        policies.append(res.policy)
        rollouts.append(roll)
        residuals.append(res.residual)
        trace.append(lam.values)
        log.debug("epoch %d lambda=%s", k, lam.values)
    lambda_trace = np.stack(trace)
    _, B = game.bounds()
    return EpisodeRecord(
        lambda_trace=lambda_trace,
        policies=EpochPolicySequence(tuple(policies), config.T0),
        rollouts=rollouts,
        metrics=compute_metrics(game, lambda_trace, rollouts),
        seed=seed,
        config=asdict(config),
        thresholds=game.thresholds.copy(),
        B=B,
        oracle_residuals=np.array(residuals),
        br_residuals=np.array(br) if config.track_residuals else None,
    )


# --------------------------------------------------------------------------
# run diagnostics


@dataclass(frozen=True)
class FeasibilityResult:
    curve: np.ndarray  # (T, m) running average cost
    final_window: np.ndarray  # (m,) mean of the running average over the final window
    window_mean: np.ndarray  # (m,) mean raw cost inside the final window
    thresholds: np.ndarray
    tol: float
    verdict: np.ndarray  # (m,) bool, final_window >= b - tol

    def collapsed(self) -> np.ndarray:
        """Whether the final-window running average sits within tol of each threshold."""
        return np.abs(self.final_window - self.thresholds) <= self.tol


def feasibility_curve(record: EpisodeRecord, tol: float = FEASIBILITY_TOL,
                      window: float = FINAL_WINDOW) -> FeasibilityResult:
    curve = record.metrics.running_avg_cost
    T = len(curve)
    start = T - max(1, int(round(window * T)))
    final = curve[start:].mean(axis=0)
    raw = record.costs()[start:].mean(axis=0)
    b = record.thresholds
    return FeasibilityResult(curve, final, raw, b, tol, final >= b - tol)


def epoch_surplus(record: EpisodeRecord) -> np.ndarray:
    """Epoch averages g_k of c - b, shape (K, m)."""
    return np.stack([r.costs.mean(axis=0) for r in record.rollouts]) - record.thresholds


def slackness_metric(record: EpisodeRecord) -> float:
    """(1/K) sum_k lam_k^T g_k over the completed epochs."""
    g = epoch_surplus(record)
    return float(np.einsum("kj,kj->k", record.lambda_trace[:-1], g).mean())


def slackness_bound(record: EpisodeRecord, B_per_constraint: Optional[np.ndarray] = None) -> float:
    """eta * B^2 / 2 + ||lam_0||^2 / (2 eta K), with B^2 read as sum_j B_j^2.

    For a single constraint this is exactly eta B^2 / 2 + ...; the per-constraint
    sum keeps the inequality pathwise valid when m > 1.
    """
    eta = record.config["eta"]
    K = record.K
    if B_per_constraint is None:
        B2 = record.B ** 2 * (1 if record.lambda_trace.shape[1] == 1 else record.lambda_trace.shape[1])
    else:
        B2 = float(np.sum(np.square(B_per_constraint)))
    lam0 = record.lambda_trace[0]
    return float(eta * B2 / 2 + lam0 @ lam0 / (2 * eta * K))


def occupancy_counts(record: EpisodeRecord) -> np.ndarray:
    return record.metrics.occupancy_counts.copy()


# --------------------------------------------------------------------------
# artifacts

ARTIFACT_FILES = ("lambda_trace.csv", "metrics.csv", "slackness.csv", "occupancy.csv")


def _fmt(x) -> str:
    return repr(float(x))


def write_artifacts(record: EpisodeRecord, out_dir: Union[str, Path], grid_side: Optional[int] = None,
                    extra_manifest: Optional[dict] = None) -> dict:
    """Write the four CSVs and ``run_manifest.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = record.lambda_trace.shape[1]
    N = record.metrics.running_avg_reward.shape[1]
    with open(out / "lambda_trace.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch"] + [f"lambda_{j}" for j in range(m)])
        for k, row in enumerate(record.lambda_trace):
            w.writerow([k] + [_fmt(v) for v in row])
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t"] + [f"running_avg_cost_{j}" for j in range(m)]
                   + [f"running_avg_reward_{i}" for i in range(N)])
        mc, mr = record.metrics.running_avg_cost, record.metrics.running_avg_reward
        for t in range(len(mc)):
            w.writerow([t] + [_fmt(v) for v in mc[t]] + [_fmt(v) for v in mr[t]])
    with open(out / "slackness.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "partial_average"])
        for k, v in enumerate(record.metrics.slackness_partial):
            w.writerow([k, _fmt(v)])
    counts = record.metrics.occupancy_counts
    with open(out / "occupancy.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scope", "state", "agent", "row", "col", "count"])
        for s, c in enumerate(counts):
            w.writerow(["joint", s, "", "", "", int(c)])
        if grid_side is not None:
            from .envs import shr_occupancy_grids

            grids = shr_occupancy_grids(counts, grid_side)
            for i in range(grids.shape[0]):
                for r in range(grid_side):
                    for c in range(grid_side):
                        w.writerow(["agent", "", i, r, c, int(grids[i, r, c])])
    manifest = {
        "seed": record.seed,
        "config": record.config,
        "checksums": {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in ARTIFACT_FILES},
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
