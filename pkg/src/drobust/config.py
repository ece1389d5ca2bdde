"""JSON run configurations: schema, validation and object builders."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import jsonschema
import numpy as np

from .core import RobustSpec
from .doubling import DoublingConfig, IntervalPlan
from .estimators import make_estimator
from .optim import SgmConfig
from .problems import (
    GaussianLinear,
    Problem,
    bernoulli_linear,
    cvar_lecam_pair,
    finite_linear,
    load_dataset_csv,
    multiclass_logistic,
    single_atom,
    synthetic_subgroup_dataset,
    three_point_hard,
)

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}

PROBLEM_TYPES = ["finite_linear", "lecam", "bernoulli", "three_point", "single_atom",
                 "gaussian_linear", "csv_logistic", "synthetic_logistic"]

SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["problem", "objective"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "problem": {
            "type": "object",
            "required": ["type"],
            "properties": {
                "type": {"enum": PROBLEM_TYPES},
                "n_atoms": _INT1, "dim": _INT1, "radius": _POS, "seed": {"type": "integer"},
                "G": _POS, "R": _POS, "alpha": _POS, "delta": {"type": "number", "minimum": 0},
                "v": {"enum": [1, -1]}, "p0": _POS, "B": _POS, "rho": _POS, "n": _INT1,
                "value": _NUM, "slope": {"type": "array", "items": _NUM, "minItems": 1},
                "scale": _POS, "path": {"type": "string"}, "mu": {"type": "number", "minimum": 0},
                "n_features": _INT1, "n_classes": {"type": "integer", "minimum": 2},
                "rare_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "objective": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["cvar", "kl_cvar", "chi2_pen", "chi2_con"]},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "lambda": _POS,
                "rho": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "estimator": {
            "type": "object",
            "properties": {
                "type": {"enum": ["minibatch", "mlmc", "dual_sgm"]},
                "n": _INT1, "n0": _INT1, "n_cap": _INT1,
            },
            "additionalProperties": False,
        },
        "optimizer": {
            "type": "object",
            "properties": {
                "type": {"enum": ["sgm", "nesterov", "doubling"]},
                "step_size": _POS,
                "iterations": _INT1,
                "momentum": {"oneOf": [
                    {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    {"const": "nesterov"},
                ]},
                "averaging": {"type": "string", "pattern": "^(none|full|suffix(:[1-9][0-9]*)?)$"},
                "radius": _POS,
                "eta_step": _POS,
                "epsilon": _POS,
                "B": _POS,
                "selection_reps": _INT1,
                "step_lambda": _POS,
                "max_iterations": _INT1,
            },
            "additionalProperties": False,
        },
        "reference": {
            "type": "object",
            "properties": {
                "value": _NUM,
                "full_batch_iterations": _INT1,
            },
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {"n": _INT1, "x": {"type": "array", "items": _NUM}},
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {
                "n": {"type": "array", "items": _INT1, "minItems": 1},
                "reps": {"type": "integer", "minimum": 2},
                "reference_value": _NUM,
            },
            "additionalProperties": False,
        },
        "bench": {
            "type": "object",
            "properties": {
                "reps": {"type": "integer", "minimum": 2},
                "n_grid": {"type": "array", "items": _INT1, "minItems": 1},
                "target": {"enum": ["grad", "value"]},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}, "timing": {"type": "boolean"}},
            "additionalProperties": False,
        },
    },
}


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` is a JSON pointer into the document."""

    def __init__(self, pointer: str, message: str):
        super().__init__(message)
        self.pointer = pointer or "/"


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def validate(cfg: Any, prefix: str = "") -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(prefix + _pointer(err.absolute_path), err.message)


def load(path: Union[str, Path]) -> List[dict]:
    """Read a config file holding one config or a list of them, validated."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if isinstance(doc, list):
        if not doc:
            raise ConfigError("", "empty config list")
        for i, entry in enumerate(doc):
            validate(entry, prefix=f"/{i}")
        return doc
    validate(doc)
    return [doc]


def _get(d: dict, key: str, default):
    return d[key] if key in d else default


def build_spec(cfg: dict) -> RobustSpec:
    try:
        return RobustSpec.from_dict(cfg["objective"])
    except ValueError as exc:
        raise ConfigError("/objective", str(exc)) from exc


def build_problem(cfg: dict) -> Problem:
    p = cfg["problem"]
    kind = p["type"]
    try:
        if kind == "finite_linear":
            return finite_linear(_get(p, "n_atoms", 200), _get(p, "dim", 5), _get(p, "radius", 1.0),
                                 _get(p, "seed", 0), _get(p, "G", 0.4))
        if kind == "lecam":
            pair = cvar_lecam_pair(_get(p, "G", 1.0), _get(p, "R", 1.0), _get(p, "alpha", 0.1),
                                   _get(p, "delta", 0.05))
            return pair[0] if _get(p, "v", 1) == 1 else pair[1]
        if kind == "bernoulli":
            return bernoulli_linear(_get(p, "p0", 0.1), _get(p, "B", 1.0), _get(p, "R", 1.0))
        if kind == "three_point":
            return three_point_hard(_get(p, "rho", 1.0), _get(p, "G", 1.0), _get(p, "n", 8))
        if kind == "single_atom":
            return single_atom(_get(p, "value", 0.5), _get(p, "slope", [1.0]), p.get("radius"))
        if kind == "gaussian_linear":
            return GaussianLinear(_get(p, "dim", 5), _get(p, "radius", 1.0), _get(p, "scale", 0.3),
                                  _get(p, "seed", 0))
        if kind == "csv_logistic":
            if "path" not in p:
                raise ConfigError("/problem", "csv_logistic needs a 'path'")
            prob = multiclass_logistic(load_dataset_csv(p["path"]), _get(p, "mu", 0.0), p.get("radius"))
        else:
            ds = synthetic_subgroup_dataset(_get(p, "n", 400), _get(p, "n_features", 4),
                                            _get(p, "n_classes", 3), _get(p, "rare_fraction", 0.05),
                                            _get(p, "seed", 0))
            prob = multiclass_logistic(ds, _get(p, "mu", 0.0), _get(p, "radius", 5.0))
        if "B" in p:
            prob.bound_B = float(p["B"])
        return prob
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("/problem", str(exc)) from exc


def estimator_type(cfg: dict) -> str:
    return cfg.get("estimator", {}).get("type", "minibatch")


def build_estimator(cfg: dict, problem: Problem, spec: RobustSpec):
    est = cfg.get("estimator", {})
    kind = est.get("type", "minibatch")
    if kind == "dual_sgm":
        return None
    n = est.get("n_cap", est.get("n", 10))
    return make_estimator(problem, spec, kind, n=n, n0=est.get("n0"))


def build_sgm(cfg: dict, problem: Problem) -> SgmConfig:
    opt = cfg.get("optimizer", {})
    default_mom = 0.0 if estimator_type(cfg) in ("mlmc", "dual_sgm") else 0.9
    kind = opt.get("type", "sgm")
    momentum = opt.get("momentum", default_mom if kind == "nesterov" else 0.0)
    try:
        return SgmConfig(step_size=opt.get("step_size", 0.01), iterations=opt.get("iterations", 1000),
                         momentum=momentum, averaging=opt.get("averaging", "none"),
                         radius=opt.get("radius", problem.radius))
    except ValueError as exc:
        raise ConfigError("/optimizer", str(exc)) from exc


def build_doubling(cfg: dict, problem: Problem, spec: RobustSpec) -> DoublingConfig:
    opt = cfg.get("optimizer", {})
    est = cfg.get("estimator", {})
    if spec.rho is None or spec.lam is not None:
        raise ConfigError("/objective/kind", "the doubling optimizer needs the chi2_con objective")
    B = opt.get("B", problem.bound_B)
    if B is None:
        raise ConfigError("/optimizer/B", "problem has no declared loss bound; set optimizer.B")
    plan = IntervalPlan(iterations=opt.get("iterations"), n0=est.get("n0"), n=est.get("n_cap", est.get("n")),
                        step_x=opt.get("step_size"), step_lambda=opt.get("step_lambda"),
                        max_iterations=opt.get("max_iterations", 20_000))
    try:
        return DoublingConfig(rho=spec.rho, epsilon=opt.get("epsilon", 0.05 * B), B=B, plan=plan,
                              selection_reps=opt.get("selection_reps", 9))
    except ValueError as exc:
        raise ConfigError("/optimizer", str(exc)) from exc


def eval_point(cfg: dict, problem: Problem) -> np.ndarray:
    x = cfg.get("eval", {}).get("x")
    if x is None:
        return problem.initial_point() if not _scale_family(problem) else np.ones(problem.dim)
    x = np.asarray(x, dtype=float)
    if x.size != problem.dim:
        raise ConfigError("/eval/x", f"expected {problem.dim} coordinates, got {x.size}")
    return x


def _scale_family(problem: Problem) -> bool:
    # Bernoulli instances use x as a loss scale; x = 0 would make every loss zero.
    return getattr(problem, "name", "") == "bernoulli"
