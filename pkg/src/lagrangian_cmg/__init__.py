"""Primal-dual solver for tabular constrained Markov games.

Each epoch solves the Lagrangian game at the current multipliers with a
Nash-equilibrium oracle, plays the resulting stationary policy for ``T0``
steps, and moves the multipliers by projected dual descent on the observed
constraint costs.
"""
from .game_core import (
    ConstrainedMarkovGame,
    EpochPolicySequence,
    MultichainError,
    ProductPolicy,
    StationaryEvaluation,
    ValidationReport,
    compose_with,
    evaluate_stationary,
    induced_chain,
    limiting_distribution,
    marginal_without,
    stationary_distribution,
    validate_game,
)
from .lagrangian import LagrangianGame, Multipliers, build_lagrangian_game, dual_descent_step, lagrangian_values
from .oracle import (
    DanskinReport,
    OracleError,
    OracleResult,
    best_response_residual,
    brute_force_ne,
    danskin_check,
    generalized_dual,
    make_oracle,
    optimistic_policy_iteration,
    solve_identical_interest,
)
from .dynamics import (
    EpisodeRecord,
    EpochRollout,
    MetricCurves,
    OracleFailure,
    PlayConfig,
    feasibility_curve,
    occupancy_counts,
    play,
    rollout_epoch,
    slackness_bound,
    slackness_metric,
    write_artifacts,
)
from .envs import ChainGameParams, KLControlCost, ShrConfig, build_chain_game, build_shr, kl_control_cost, shr_state
from .serialization import game_from_dict, game_to_dict, load_game, save_game
from .config import RunConfig, load_config

__version__ = "0.1.0"
