import itertools
import json

import numpy as np
import pytest
import scipy.sparse as sp

from lagrangian_cmg.game_core import ConstrainedMarkovGame
from lagrangian_cmg.envs import build_shr

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_game(kernel, reward, cost=None, thresholds=(), action_counts=None, allowed=None, name="t"):
    """Small-game helper: kernel (S, A, S), reward (N, S, A) or (S, A) for a shared reward."""
    P = np.asarray(kernel, dtype=float)
    S, A, _ = P.shape
    r = np.asarray(reward, dtype=float)
    if action_counts is None:
        action_counts = (A, 1)
    N = len(action_counts)
    if r.ndim == 2:
        r = np.broadcast_to(r, (N, S, A)).copy()
    m = len(thresholds)
    c = np.zeros((m, S, A)) if cost is None else np.asarray(cost, dtype=float).reshape(m, S, A)
    if allowed is None:
        allowed = tuple(np.ones((S, n), dtype=bool) for n in action_counts)
    return ConstrainedMarkovGame(S, tuple(action_counts), allowed, r, c, np.asarray(thresholds, dtype=float),
                                 sp.csr_matrix(P.reshape(S * A, S)), name=name)


def power_stationary(chain, iters=200_000):
    """Cesaro average of chain powers from the uniform start; independent of the linear solve."""
    P = np.asarray(chain, dtype=float)
    # average of P and P^2 kills period-2 oscillation; iterate the lazy chain for the rest
    lazy = 0.5 * (P + np.eye(len(P)))
    mu = np.full(len(P), 1.0 / len(P))
    for _ in range(iters):
        nxt = mu @ lazy
        if np.abs(nxt - mu).max() < 1e-15:
            break
        mu = nxt
    return mu


def enumerate_joint_gains(P3, r):
    """Max average reward over deterministic joint policies by explicit enumeration (eigenvector solve)."""
    S, A, _ = P3.shape
    best = -np.inf
    for acts in itertools.product(range(A), repeat=S):
        chain = P3[np.arange(S), acts]
        w, v = np.linalg.eig(chain.T)
        k = np.argmin(np.abs(w - 1))
        mu = np.real(v[:, k])
        mu = mu / mu.sum()
        best = max(best, float(mu @ r[np.arange(S), acts]))
    return best


@pytest.fixture(scope="session")
def shr():
    return build_shr()


@pytest.fixture(scope="session")
def shr_sweep(tmp_path_factory):
    """The 3 thresholds x 5 seeds grid-world sweep, run once through the CLI runner."""
    from lagrangian_cmg.cli import run
    from lagrangian_cmg.config import RunConfig, default_shr_config

    out = tmp_path_factory.mktemp("shr_sweep")
    cfg = RunConfig.from_dict(default_shr_config(str(out)))
    code, summary = run(cfg, threads=1)
    return code, summary, out


def load_json(path):
    with open(path) as f:
        return json.load(f)
