"""Run configuration: a versioned JSON document validated against ``RUN_SCHEMA``.

Example::

    {
      "schema_version": 1,
      "env": {"kind": "shr", "params": {"rest_threshold": 0.5, "kl_weight": 1.0}},
      "K": 200, "T0": 100, "eta": 0.1, "lambda0": [5.0],
      "initial_state": {"mode": "fixed", "cells": [12, 14]},
      "oracle": {"kind": "rvi", "tol": 1e-9, "max_iter": 100000, "sweeps": 20},
      "seeds": [0, 1, 2, 3, 4],
      "thresholds": [[0.25], [0.5], [0.75]],
      "output_dir": "runs/shr",
      "feasibility_tol": 0.05
    }

``env.kind`` is ``shr`` (params are ``ShrConfig`` fields), ``synthetic``
(params are ``ChainGameParams`` fields) or ``file`` (``path`` to a game JSON,
relative paths resolved against the config file).  ``initial_state`` is
``{"mode": "fixed", "state": s}``, ``{"mode": "fixed", "cells": [c1, c2]}``
(grid games only) or ``{"mode": "random"}``.  ``thresholds``, when present,
sweeps the constraint thresholds; each entry is one threshold vector.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import jsonschema

from .envs import ChainGameParams, ShrConfig, build_chain_game, build_shr, shr_state
from .game_core import ConstrainedMarkovGame
from .serialization import load_game

CONFIG_SCHEMA_VERSION = 1

_pos_int = {"type": "integer", "minimum": 1}
_vector = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version", "env", "K", "T0", "eta", "lambda0", "seeds", "output_dir"],
    "properties": {
        "schema_version": {"const": CONFIG_SCHEMA_VERSION},
        "env": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["shr", "file", "synthetic"]},
                "params": {"type": "object"},
                "path": {"type": "string"},
            },
        },
        "K": _pos_int,
        "T0": _pos_int,
        "eta": {"type": "number", "exclusiveMinimum": 0},
        "lambda0": _vector,
        "initial_state": {
            "type": "object",
            "required": ["mode"],
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["fixed", "random"]},
                "state": {"type": "integer", "minimum": 0},
                "cells": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["rvi", "optimistic_pi", "brute_force"]},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": _pos_int,
                "sweeps": _pos_int,
            },
        },
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "thresholds": {"type": ["array", "null"], "items": {"type": "array", "items": {"type": "number"},
                                                            "minItems": 1}},
        "output_dir": {"type": "string", "minLength": 1},
        "feasibility_tol": {"type": "number", "minimum": 0},
        "track_residuals": {"type": "boolean"},
    },
}

ORACLE_DEFAULTS = {"kind": "rvi", "tol": 1e-9, "max_iter": 100_000, "sweeps": 20}


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending field (dotted)."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        parts += missing[:1]
    return ".".join(parts)


@dataclass(frozen=True)
class RunConfig:
    env: dict
    K: int
    T0: int
    eta: float
    lambda0: tuple[float, ...]
    seeds: tuple[int, ...]
    output_dir: str
    initial_state: dict = field(default_factory=lambda: {"mode": "fixed", "state": 0})
    oracle: dict = field(default_factory=lambda: dict(ORACLE_DEFAULTS))
    thresholds: Optional[tuple[tuple[float, ...], ...]] = None
    feasibility_tol: float = 0.05
    track_residuals: bool = False
    base_dir: str = "."  # where relative env paths resolve; not serialised

    @classmethod
    def from_dict(cls, d: dict, base_dir: Union[str, Path] = ".") -> "RunConfig":
        validator = jsonschema.Draft202012Validator(RUN_SCHEMA)
        errors = sorted(validator.iter_errors(d), key=lambda e: (len(e.absolute_path), str(e.absolute_path)))
        if errors:
            raise ConfigError(_error_path(errors[0]), errors[0].message)
        oracle = dict(ORACLE_DEFAULTS)
        oracle.update(d.get("oracle", {}))
        env = copy.deepcopy(d["env"])
        if env["kind"] == "file" and "path" not in env:
            raise ConfigError("env.path", "file environments need a path")
        init = copy.deepcopy(d.get("initial_state", {"mode": "fixed", "state": 0}))
        if init["mode"] == "fixed" and ("state" in init) == ("cells" in init):
            raise ConfigError("initial_state", "fixed mode needs exactly one of 'state' or 'cells'")
        th = d.get("thresholds")
        cfg = cls(
            env=env,
            K=d["K"],
            T0=d["T0"],
            eta=float(d["eta"]),
            lambda0=tuple(float(x) for x in d["lambda0"]),
            seeds=tuple(d["seeds"]),
            output_dir=d["output_dir"],
            initial_state=init,
            oracle=oracle,
            thresholds=None if th is None else tuple(tuple(float(x) for x in v) for v in th),
            feasibility_tol=float(d.get("feasibility_tol", 0.05)),
            track_residuals=bool(d.get("track_residuals", False)),
            base_dir=str(base_dir),
        )
        if cfg.thresholds is not None and any(len(v) != len(cfg.lambda0) for v in cfg.thresholds):
            raise ConfigError("thresholds", "each threshold vector must match the length of lambda0")
        return cfg

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "env": copy.deepcopy(self.env),
            "K": self.K,
            "T0": self.T0,
            "eta": self.eta,
            "lambda0": list(self.lambda0),
            "initial_state": copy.deepcopy(self.initial_state),
            "oracle": dict(self.oracle),
            "seeds": list(self.seeds),
            "thresholds": None if self.thresholds is None else [list(v) for v in self.thresholds],
            "output_dir": self.output_dir,
            "feasibility_tol": self.feasibility_tol,
            "track_residuals": self.track_residuals,
        }

    def replace(self, **kw) -> "RunConfig":
        d = {**self.__dict__, **kw}
        return RunConfig(**d)

    def threshold_cells(self) -> list[Optional[tuple[float, ...]]]:
        return [None] if self.thresholds is None else list(self.thresholds)

    def build_game(self, thresholds: Optional[tuple[float, ...]] = None) -> ConstrainedMarkovGame:
        kind = self.env["kind"]
        params = self.env.get("params", {})
        try:
            if kind == "shr":
                shr = ShrConfig.from_dict(params)
                if thresholds is not None:
                    shr = ShrConfig.from_dict({**shr.to_dict(), "rest_threshold": thresholds[0]})
                game = build_shr(shr)
            elif kind == "synthetic":
                p = dict(params)
                if "action_counts" in p:
                    p["action_counts"] = tuple(p["action_counts"])
                game, _ = build_chain_game(ChainGameParams(**p))
            else:
                path = Path(self.env["path"])
                if not path.is_absolute():
                    path = Path(self.base_dir) / path
                game = load_game(path)
        except TypeError as exc:
            raise ConfigError("env.params", str(exc)) from exc
        if thresholds is not None and kind != "shr":
            game = game.with_thresholds(thresholds)
        if game.num_constraints != len(self.lambda0):
            raise ConfigError("lambda0", f"game has {game.num_constraints} constraints, lambda0 has {len(self.lambda0)}")
        return game

    def start_state(self, game: ConstrainedMarkovGame) -> Union[int, str]:
        init = self.initial_state
        if init["mode"] == "random":
            return "random"
        if "cells" in init:
            if self.env["kind"] != "shr":
                raise ConfigError("initial_state.cells", "cell coordinates need a grid environment")
            side = self.env.get("params", {}).get("side", 5)
            if any(c > side * side for c in init["cells"]):
                raise ConfigError("initial_state.cells", f"cells must lie in 1..{side * side}")
            return shr_state(*init["cells"], side=side)
        if init["state"] >= game.num_states:
            raise ConfigError("initial_state.state", f"state {init['state']} out of range")
        return init["state"]


def load_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate; raises OSError, json.JSONDecodeError or ConfigError."""
    p = Path(path)
    return RunConfig.from_dict(json.loads(p.read_text()), base_dir=p.parent)


def default_shr_config(output_dir: str = "runs/shr") -> dict:
    """The grid-world sweep: three thresholds, five seeds, start (12, 14)."""
    return {
        "schema_version": CONFIG_SCHEMA_VERSION,
        "env": {"kind": "shr", "params": ShrConfig().to_dict()},
        "K": 200,
        "T0": 100,
        "eta": 0.1,
        "lambda0": [5.0],
        "initial_state": {"mode": "fixed", "cells": [12, 14]},
        "oracle": dict(ORACLE_DEFAULTS),
        "seeds": [0, 1, 2, 3, 4],
        "thresholds": [[0.25], [0.5], [0.75]],
        "output_dir": output_dir,
        "feasibility_tol": 0.05,
        "track_residuals": False,
    }
