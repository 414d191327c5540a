"""JSON encoding of constrained Markov games.

Layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "...",
      "num_states": S,
      "action_counts": [n_1, ..., n_N],
      "allowed": [[[bool] * n_i] * S for each agent],
      "reward": [[[float] * |A|] * S] * N,
      "cost": [[[float] * |A|] * S] * m,
      "thresholds": [float] * m,
      "kernel": {"form": "deterministic", "next_state": [int] * (S * |A|)}
              | {"form": "dense", "rows": [[float] * S] * (S * |A|)}
              | {"form": "sparse", "entries": [[row, col, prob], ...]},
      "control_cost": null | {"kind": "kl", "weight": w, "sign": "penalty"|"bonus",
                              "natural": [[[float] * n_i] * S per agent]}
    }

Kernel row ``s * |A| + a`` holds ``P(. | s, a)`` with joint actions in
row-major order over agents.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Union

import jsonschema
import numpy as np
import scipy.sparse as sp

from .envs import KLControlCost
from .game_core import ConstrainedMarkovGame, validate_game

GAME_SCHEMA_VERSION = 1

_num = {"type": "number"}
_mat = {"type": "array", "items": {"type": "array", "items": _num}}

GAME_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "num_states", "action_counts", "allowed", "reward",
                 "cost", "thresholds", "kernel"],
    "properties": {
        "schema_version": {"const": GAME_SCHEMA_VERSION},
        "name": {"type": "string"},
        "num_states": {"type": "integer", "minimum": 1},
        "action_counts": {"type": "array", "minItems": 2, "items": {"type": "integer", "minimum": 1}},
        "allowed": {"type": "array", "items": {"type": "array", "items": {"type": "array", "items": {"type": "boolean"}}}},
        "reward": {"type": "array", "items": _mat},
        "cost": {"type": "array", "items": _mat},
        "thresholds": {"type": "array", "items": _num},
        "kernel": {
            "type": "object",
            "required": ["form"],
            "properties": {"form": {"enum": ["deterministic", "dense", "sparse"]}},
            "oneOf": [
                {"properties": {"form": {"const": "deterministic"},
                                "next_state": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
                 "required": ["next_state"]},
                {"properties": {"form": {"const": "dense"}, "rows": _mat}, "required": ["rows"]},
                {"properties": {"form": {"const": "sparse"},
                                "entries": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3,
                                                                       "items": _num}}},
                 "required": ["entries"]},
            ],
        },
        "control_cost": {
            "oneOf": [
                {"type": "null"},
                {"type": "object", "required": ["kind", "weight", "sign", "natural"],
                 "properties": {"kind": {"const": "kl"}, "weight": {"type": "number", "minimum": 0},
                                "sign": {"enum": ["penalty", "bonus"]},
                                "natural": {"type": "array", "items": _mat}}},
            ]
        },
    },
}


def _kernel_to_dict(kernel: sp.csr_matrix, form: Optional[str]) -> dict:
    nnz_per_row = np.diff(kernel.indptr)
    if form is None:
        form = "deterministic" if np.all(nnz_per_row == 1) and np.all(kernel.data == 1.0) else "sparse"
    if form == "deterministic":
        if not (np.all(nnz_per_row == 1) and np.all(kernel.data == 1.0)):
            raise ValueError("kernel is not deterministic")
        return {"form": "deterministic", "next_state": kernel.indices.tolist()}
    if form == "dense":
        return {"form": "dense", "rows": kernel.toarray().tolist()}
    if form == "sparse":
        coo = kernel.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return {"form": "sparse",
                "entries": [[int(coo.row[k]), int(coo.col[k]), float(coo.data[k])] for k in order]}
    raise ValueError(f"unknown kernel form {form!r}")


def game_to_dict(game: ConstrainedMarkovGame, kernel_form: Optional[str] = None) -> dict:
    cc = game.control_cost
    if cc is not None and not isinstance(cc, KLControlCost):
        raise TypeError(f"cannot serialise control cost of type {type(cc).__name__}")
    return {
        "schema_version": GAME_SCHEMA_VERSION,
        "name": game.name,
        "num_states": game.num_states,
        "action_counts": list(game.action_counts),
        "allowed": [m.tolist() for m in game.allowed],
        "reward": game.reward.tolist(),
        "cost": game.cost.tolist(),
        "thresholds": game.thresholds.tolist(),
        "kernel": _kernel_to_dict(game.kernel, kernel_form),
        "control_cost": None if cc is None else cc.to_dict(),
    }


def game_from_dict(d: dict) -> ConstrainedMarkovGame:
    jsonschema.validate(d, GAME_SCHEMA)
    S = d["num_states"]
    A = int(np.prod(d["action_counts"]))
    k = d["kernel"]
    if k["form"] == "deterministic":
        nxt = np.asarray(k["next_state"], dtype=int)
        kernel = sp.csr_matrix((np.ones(len(nxt)), (np.arange(len(nxt)), nxt)), shape=(S * A, S))
    elif k["form"] == "dense":
        kernel = sp.csr_matrix(np.asarray(k["rows"], dtype=float))
    else:
        e = np.asarray(k["entries"], dtype=float).reshape(-1, 3)
        kernel = sp.csr_matrix((e[:, 2], (e[:, 0].astype(int), e[:, 1].astype(int))), shape=(S * A, S))
    cc = d.get("control_cost")
    control = None
    if cc is not None:
        control = KLControlCost(tuple(np.asarray(n, dtype=float) for n in cc["natural"]), cc["weight"], cc["sign"])
    cost = np.asarray(d["cost"], dtype=float).reshape(len(d["thresholds"]), S, A)
    game = ConstrainedMarkovGame(
        num_states=S,
        action_counts=tuple(d["action_counts"]),
        allowed=tuple(np.asarray(m, dtype=bool) for m in d["allowed"]),
        reward=np.asarray(d["reward"], dtype=float),
        cost=cost,
        thresholds=np.asarray(d["thresholds"], dtype=float),
        kernel=kernel,
        control_cost=control,
        name=d.get("name", ""),
    )
    report = validate_game(game)
    if not report.ok:
        raise ValueError("invalid game: " + "; ".join(report.violations[:5]))
    return game


def save_game(game: ConstrainedMarkovGame, path: Union[str, Path], kernel_form: Optional[str] = None) -> None:
    Path(path).write_text(json.dumps(game_to_dict(game, kernel_form)) + "\n")


def load_game(path: Union[str, Path]) -> ConstrainedMarkovGame:
    return game_from_dict(json.loads(Path(path).read_text()))
