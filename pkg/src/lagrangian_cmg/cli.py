"""Command line runner: ``run <config>``, ``verify``, ``inspect <dir>``.

Exit codes: 0 success, 1 verify found failures (or inspect found checksum
mismatches), 2 invalid config (the message names the field), 3 oracle
failure (the message names the epoch), 4 I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .dynamics import (
    ARTIFACT_FILES,
    FINAL_WINDOW,
    OracleFailure,
    PlayConfig,
    feasibility_curve,
    play,
    slackness_bound,
    slackness_metric,
    write_artifacts,
)

log = logging.getLogger("lagrangian_cmg")

EXIT_OK, EXIT_FAILURES, EXIT_CONFIG, EXIT_ORACLE, EXIT_IO = 0, 1, 2, 3, 4


def _cell_name(thresholds: Optional[tuple[float, ...]], seed: int) -> str:
    if thresholds is None:
        return f"seed{seed}"
    return "b" + "_".join(repr(float(b)) for b in thresholds) + f"-seed{seed}"


def cell_summary(record, game, feasibility_tol: float) -> dict:
    feas = feasibility_curve(record, tol=feasibility_tol)
    rewards = record.metrics.running_avg_reward
    start = len(rewards) - max(1, int(round(FINAL_WINDOW * len(rewards))))
    lam_l1 = record.metrics.max_lambda_norm
    eta = record.config["eta"]
    slack = slackness_metric(record)
    bound = slackness_bound(record)
    cap = float(record.lambda_trace[0].sum() + 10 * eta * record.B)
    return {
        "seed": record.seed,
        "thresholds": record.thresholds.tolist(),
        "B": record.B,
        "feasible": feas.verdict.tolist(),
        "verdict": bool(feas.verdict.all()),
        "collapsed": feas.collapsed().tolist(),
        "final_window_cost": feas.final_window.tolist(),
        "window_mean_cost": feas.window_mean.tolist(),
        "final_window_reward": rewards[start:].mean(axis=0).tolist(),
        "final_running_avg_cost": record.metrics.running_avg_cost[-1].tolist(),
        "final_running_avg_reward": rewards[-1].tolist(),
        "slackness": slack,
        "slackness_bound": bound,
        "slackness_ok": bool(slack <= bound),
        "max_lambda_l1": float(lam_l1[-1]),
        "lambda_cap": cap,
        "lambda_bounded": bool(lam_l1[-1] <= cap),
        "lambda_final": record.lambda_trace[-1].tolist(),
    }


def run_cell(config: dict, base_dir: str, thresholds, seed: int, out_dir: str) -> dict:
    """One (threshold, seed) episode; returns its summary or an error entry."""
    cfg = RunConfig.from_dict(config, base_dir)
    name = _cell_name(None if thresholds is None else tuple(thresholds), seed)
    try:
        game = cfg.build_game(None if thresholds is None else tuple(thresholds))
        pc = PlayConfig(
            K=cfg.K, T0=cfg.T0, eta=cfg.eta, lambda0=cfg.lambda0,
            initial_state=cfg.start_state(game),
            oracle=cfg.oracle["kind"], oracle_tol=cfg.oracle["tol"],
            oracle_max_iter=cfg.oracle["max_iter"], oracle_sweeps=cfg.oracle["sweeps"],
            track_residuals=cfg.track_residuals,
        )
        record = play(game, pc, seed=seed)
    except OracleFailure as exc:
        return {"cell": name, "error": "oracle", "epoch": exc.epoch, "message": str(exc)}
    except ConfigError as exc:
        return {"cell": name, "error": "config", "path": exc.path, "message": str(exc)}
    summary = {"cell": name, **cell_summary(record, game, cfg.feasibility_tol)}
    grid_side = cfg.env.get("params", {}).get("side", 5) if cfg.env["kind"] == "shr" else None
    try:
        write_artifacts(record, Path(out_dir) / name, grid_side=grid_side,
                        extra_manifest={"game": game.name, "summary": summary})
    except OSError as exc:
        return {"cell": name, "error": "io", "message": str(exc)}
    return summary


def run(cfg: RunConfig, threads: int = 1) -> tuple[int, dict]:
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = Path.cwd() / out
    # fail early on anything the workers would all trip over
    for th in cfg.threshold_cells():
        cfg.start_state(cfg.build_game(th))
    jobs = [(cfg.to_dict(), cfg.base_dir, th, seed, str(out)) for th in cfg.threshold_cells() for seed in cfg.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, *zip(*jobs)))
    else:
        results = [run_cell(*j) for j in jobs]
    summary = {
        "config": cfg.to_dict(),
        "cells": results,
        "all_feasible": all(r.get("verdict", False) for r in results),
        "num_collapsed": sum(all(r.get("collapsed", [False])) for r in results),
        "num_cells": len(results),
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    except OSError as exc:
        log.error("cannot write summary: %s", exc)
        return EXIT_IO, summary
    for r in results:
        if r.get("error") == "oracle":
            log.error("%s: %s", r["cell"], r["message"])
            return EXIT_ORACLE, summary
        if r.get("error") == "io":
            log.error("%s: %s", r["cell"], r["message"])
            return EXIT_IO, summary
        if r.get("error") == "config":
            log.error("config error at %s", r["message"])
            return EXIT_CONFIG, summary
    return EXIT_OK, summary


# --------------------------------------------------------------------------
# verify


def _prop(name: str, failures: int, trials: int, **measured) -> dict:
    return {"name": name, "passed": failures == 0, "failures": failures, "trials": trials, **measured}


def _oracle_equivalence(oracle_tol: float, n: int, seed0: int = 0) -> dict:
    from .envs import ChainGameParams, build_chain_game
    from .lagrangian import build_lagrangian_game
    from .oracle import brute_force_optimum, solve_identical_interest

    failures, worst = 0, 0.0
    for seed in range(seed0, seed0 + n):
        rng = np.random.default_rng(10_000 + seed)
        params = ChainGameParams(num_states=int(rng.integers(2, 5)),
                                 action_counts=tuple(int(x) for x in rng.integers(2, 4, size=2)), seed=seed)
        game, _ = build_chain_game(params)
        lgame = build_lagrangian_game(game, rng.uniform(0, 2, size=game.num_constraints))
        res = solve_identical_interest(lgame, tol=oracle_tol)
        err = abs(float(res.gain[0]) - brute_force_optimum(lgame))
        worst = max(worst, err)
        failures += err > 1e-6
    return _prop("oracle_equivalence", failures, n, max_abs_error=worst)


def _dual_exactness() -> dict:
    from .lagrangian import Multipliers, dual_descent_step

    cases = [  # (lam, eta, costs, b, expected)
        ([1.0], 0.1, [[1.0], [0.0]], [0.5], [1.0]),
        ([1.0], 0.5, [[0.0], [0.0]], [0.25], [1.125]),
        ([0.05], 0.1, [[2.0], [2.0]], [0.5], [0.0]),
        ([1.0, 0.0], 1.0, [[0.0, 1.0]], [0.125, 0.5], [1.125, 0.0]),
    ]
    failures = 0
    for lam, eta, costs, b, want in cases:
        got = dual_descent_step(Multipliers(lam, eta), costs, b).values
        failures += not np.array_equal(got, np.array(want))
    return _prop("dual_step_exactness", failures, len(cases))


def _danskin(n: int) -> dict:
    from .envs import ChainGameParams, build_chain_game
    from .oracle import danskin_check

    failures, worst = 0, np.inf
    for t in range(n):
        rng = np.random.default_rng(20_000 + t)
        params = ChainGameParams(num_states=int(rng.integers(2, 5)), action_counts=(2, 2),
                                 num_constraints=int(rng.integers(1, 3)), seed=t)
        game, _ = build_chain_game(params)
        m = game.num_constraints
        rep = danskin_check(game, rng.uniform(0, 3, m), rng.uniform(0, 3, m), agent=int(rng.integers(2)))
        worst = min(worst, rep.lhs - rep.rhs)
        failures += not rep.satisfied
    return _prop("danskin", failures, n, min_lhs_minus_rhs=worst)


def unbiased_rollout_stats(steps: int = 100_000, seed: int = 0, batches: int = 100) -> dict:
    """SHR under the uniform policy from cells (12, 14): rollout mean rest cost vs the exact value."""
    from .dynamics import episode_rngs, rollout_epoch
    from .envs import build_shr, shr_state
    from .game_core import ProductPolicy, evaluate_stationary

    game = build_shr()
    policy = ProductPolicy.uniform(game)
    s0 = shr_state(12, 14)
    exact = float(evaluate_stationary(game, policy, initial_state=s0).gain_per_constraint[0])
    _, rng = episode_rngs(seed)
    c = rollout_epoch(game, policy, s0, steps, rng).costs[:, 0]
    means = c[: steps - steps % batches].reshape(batches, -1).mean(axis=1)
    se = float(means.std(ddof=1) / np.sqrt(batches))
    mean = float(c.mean())
    return {"exact": exact, "empirical": mean, "std_error": se, "z": (mean - exact) / se if se > 0 else 0.0}


def verify(level: str = "quick", oracle_tol: float = 1e-9) -> dict:
    props = [_dual_exactness(), _oracle_equivalence(oracle_tol, 10)]
    if level == "full":
        props.append(_danskin(100))
        st = unbiased_rollout_stats()
        props.append(_prop("unbiased_rollout", int(abs(st["z"]) > 3), 1, **st))
    return {"level": level, "properties": props, "failures": sum(p["failures"] for p in props)}


# --------------------------------------------------------------------------
# inspect


def inspect_dir(path: Path) -> tuple[int, str]:
    lines = []
    status = EXIT_OK
    if (path / "summary.json").is_file():
        summary = json.loads((path / "summary.json").read_text())
        cells = summary["cells"]
        lines.append(f"{len(cells)} cells, all feasible: {summary['all_feasible']}, "
                     f"collapsed: {summary['num_collapsed']}/{summary['num_cells']}")
        lines.append("cell                         verdict  window_cost  window_reward  max|lam|1  slack<=bound")
        for c in cells:
            if "error" in c:
                lines.append(f"{c['cell']:<28} ERROR {c['message']}")
                continue
            lines.append(
                f"{c['cell']:<28} {'pass' if c['verdict'] else 'FAIL':<8} "
                f"{c['final_window_cost'][0]:<12.4f} {c['final_window_reward'][0]:<14.4f} "
                f"{c['max_lambda_l1']:<10.4f} {c['slackness_ok']}"
            )
        dirs = [path / c["cell"] for c in cells if "error" not in c]
    elif (path / "run_manifest.json").is_file():
        dirs = [path]
        s = json.loads((path / "run_manifest.json").read_text()).get("summary", {})
        lines.append(json.dumps(s, indent=2))
    else:
        raise FileNotFoundError(f"{path} has neither summary.json nor run_manifest.json")
    for d in dirs:
        manifest = json.loads((d / "run_manifest.json").read_text())
        for name, digest in manifest["checksums"].items():
            if hashlib.sha256((d / name).read_bytes()).hexdigest() != digest:
                lines.append(f"checksum mismatch: {d / name}")
                status = EXIT_FAILURES
    return status, "\n".join(lines)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lagrangian-cmg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the episodes described by a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=int, action="append", help="replace the config's seeds (repeatable)")
    r.add_argument("--out", help="replace the config's output directory")
    r.add_argument("--threads", type=int, default=1, help="worker processes for the sweep")
    v = sub.add_parser("verify", help="run the property checks and print a JSON report")
    v.add_argument("--level", choices=("quick", "full"), default="quick")
    v.add_argument("--out", help="also write the report to this file")
    # test hook: loosen the solver tolerance to force equivalence failures
    v.add_argument("--oracle-tol", type=float, default=1e-9, help=argparse.SUPPRESS)
    i = sub.add_parser("inspect", help="print the summary of an artifact directory")
    i.add_argument("path")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "run":
        try:
            cfg = load_config(args.config)
            overrides = {}
            if args.seed:
                overrides["seeds"] = tuple(args.seed)
            if args.out:
                overrides["output_dir"] = args.out
            if overrides:
                cfg = RunConfig.from_dict({**cfg.to_dict(), **{k: list(v) if isinstance(v, tuple) else v
                                                               for k, v in overrides.items()}}, cfg.base_dir)
            code, summary = run(cfg, threads=max(1, args.threads))
        except ConfigError as exc:
            print(f"config error at {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except json.JSONDecodeError as exc:
            print(f"config error at <root>: not valid JSON ({exc})", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as exc:
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        for c in summary["cells"]:
            if c.get("error") == "oracle":
                print(f"oracle failure in {c['cell']} at epoch {c['epoch']}: {c['message']}", file=sys.stderr)
        print(f"wrote {summary['num_cells']} cells to {cfg.output_dir}; all feasible: {summary['all_feasible']}")
        return code
    if args.command == "verify":
        report = verify(args.level, oracle_tol=args.oracle_tol)
        text = json.dumps(report, indent=2)
        print(text)
        if args.out:
            try:
                Path(args.out).write_text(text + "\n")
            except OSError as exc:
                print(f"I/O error: {exc}", file=sys.stderr)
                return EXIT_IO
        return EXIT_OK if report["failures"] == 0 else EXIT_FAILURES
    try:
        code, text = inspect_dir(Path(args.path))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
