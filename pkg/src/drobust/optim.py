"""Projected stochastic gradient drivers.

``run_sgm`` is plain projected SGM with iterate averaging. ``run_nesterov``
runs either the three-sequence accelerated method with ``theta_t = 2/(t+1)``
(``momentum="nesterov"``) or the unconstrained constant-momentum recursion
used for practical runs (``momentum=omega``).
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Tuple, Union

import numpy as np

from .core import Kind, RobustSpec
from .estimators import Estimator, dual_sgm_grad
from .inner import solve_arrays
from .problems import Problem

Momentum = Union[float, str]
TRACE_HEADER = ("iter", "grad_evals", "value", "step_size", "wall_ms")


class DivergenceError(FloatingPointError):
    """A non-finite gradient or iterate; carries the iteration index."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"iteration {iteration}: {detail}")
        self.iteration = iteration


def _parse_averaging(avg) -> Tuple[str, int]:
    if isinstance(avg, tuple):
        mode, k = avg
    elif isinstance(avg, str) and avg.startswith("suffix"):
        mode, _, k = avg.partition(":")
        k = int(k) if k else 3
    else:
        mode, k = str(avg), 1
    mode = mode.lower()
    if mode not in ("none", "full", "suffix"):
        raise ValueError(f"unknown averaging scheme {avg!r}")
    if mode == "suffix" and int(k) < 1:
        raise ValueError("suffix averaging parameter must be >= 1")
    return mode, int(k)


@dataclass(frozen=True)
class SgmConfig:
    """Step size, horizon, momentum, averaging and feasible-ball radius.

    ``averaging`` is ``"none"``, ``"full"`` or ``"suffix:k"`` (average the
    last ``ceil(T/k)`` iterates). ``momentum`` is a constant in ``[0, 1)`` or
    the string ``"nesterov"`` for the ``theta_t = 2/(t+1)`` schedule.
    """

    step_size: float
    iterations: int
    momentum: Momentum = 0.0
    averaging: str = "none"
    radius: Optional[float] = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if isinstance(self.momentum, str):
            if self.momentum != "nesterov":
                raise ValueError("momentum must be a number in [0, 1) or 'nesterov'")
        elif not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        _parse_averaging(self.averaging)
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass
class TraceRecord:
    iteration: int
    grad_evals: int
    value: float
    step_size: float
    wall_ms: float


@dataclass
class RunTrace:
    records: List[TraceRecord] = field(default_factory=list)

    def add(self, rec: TraceRecord) -> None:
        if self.records and rec.grad_evals < self.records[-1].grad_evals:
            raise ValueError("cumulative gradient evaluations must not decrease")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def write_csv(self, path, timing: bool = False) -> None:
        """Write the fixed-header trace; ``wall_ms`` is left empty unless ``timing``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for r in self.records:
                w.writerow([r.iteration, r.grad_evals, repr(float(r.value)),
                            repr(float(r.step_size)), f"{r.wall_ms:.3f}" if timing else ""])


def project_ball(x, R: Optional[float]) -> np.ndarray:
    """Euclidean projection onto ``{|x| <= R}``; identity when ``R`` is None."""
    x = np.asarray(x, dtype=float)
    if R is None:
        return x
    if not R > 0:
        raise ValueError("radius must be positive")
    nrm = float(np.linalg.norm(x))
    if nrm <= R:
        return x
    return x * (R / nrm)


class SuffixAverager:
    """Running mean of the iterates ``t > T - ceil(T/k)`` in O(d) memory."""

    def __init__(self, T: int, k: int = 1):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.start = T - math.ceil(T / k) + 1
        self.count = 0
        self.mean = None

    def update(self, t: int, x) -> None:
        if t < self.start:
            return
        self.count += 1
        x = np.asarray(x, dtype=float)
        if self.mean is None:
            self.mean = x.copy()
        else:
            self.mean += (x - self.mean) / self.count

    def value(self, fallback):
        return fallback if self.mean is None else self.mean


def suffix_average(iterates: Iterable, k: int, T: Optional[int] = None):
    """Average of the last ``ceil(T/k)`` items of a stream of length ``T``.

    ``T`` may be omitted for sized sequences.
    """
    if T is None:
        T = len(iterates)
    avg = SuffixAverager(T, k)
    last = None
    for t, x in enumerate(iterates, start=1):
        avg.update(t, x)
        last = x
    return avg.value(last)


class _Averager:
    def __init__(self, spec: str, T: int):
        mode, k = _parse_averaging(spec)
        self.mode = mode
        self.suffix = SuffixAverager(T, k if mode == "suffix" else 1) if mode != "none" else None

    def update(self, t, x):
        if self.suffix is not None:
            self.suffix.update(t, x)

    def current(self, x):
        return x if self.suffix is None else self.suffix.value(x)


def nesterov_theta(t: int) -> float:
    return 2.0 / (t + 1.0)


def theoretical_step_size(kind: str, R: float, T: int, Gamma: Optional[float] = None,
                          sigma: Optional[float] = None, Lambda: float = math.inf) -> float:
    """Step-size rules with unit constants: ``R/(sqrt(T) Gamma)`` for SGM and
    ``min(1/Lambda, R/(T^1.5 sigma))`` for the accelerated method."""
    kind = kind.upper()
    if kind == "SGM":
        if not Gamma or Gamma <= 0:
            raise ValueError("SGM step needs Gamma > 0")
        return R / (math.sqrt(T) * Gamma)
    if kind == "AGM":
        if not sigma or sigma <= 0:
            raise ValueError("AGM step needs sigma > 0")
        step = R / (T ** 1.5 * sigma)
        # Lambda = inf means no smoothness cap
        return step if math.isinf(Lambda) else min(1.0 / Lambda, step)
    raise ValueError(f"unknown method {kind!r}")


def eval_cadence(T: int) -> int:
    return max(1, T // 200)


def make_evaluator(problem: Problem, spec: RobustSpec, rng: Optional[np.random.Generator] = None,
                   n_eval: int = 2000) -> Callable[[np.ndarray], float]:
    """Exact full-batch value for finite supports, else a fixed held-out batch."""
    if problem.finite:
        atoms = problem.atoms()
        return lambda x: solve_arrays(problem.losses(x, atoms), spec, p=problem.probs)[2]
    if rng is None:
        raise ValueError("an evaluation stream is needed for infinite-support problems")
    held_out = problem.sample(rng, n_eval)
    return lambda x: solve_arrays(problem.losses(x, held_out), spec)[2]


class _Loop:
    """Shared bookkeeping: gradient checks, evaluation cadence and the trace."""

    def __init__(self, cfg: SgmConfig, evaluator, eval_every):
        self.cfg = cfg
        self.evaluator = evaluator
        self.every = eval_every or eval_cadence(cfg.iterations)
        self.trace = RunTrace()
        self.evals = 0
        self.t0 = time.perf_counter()

    def grad(self, estimator, x, rng, t):
        try:
            out = estimator(x, rng)
        except FloatingPointError as exc:
            raise DivergenceError(t, str(exc)) from exc
        self.evals += out.grad_evals
        return out.grad

    def check(self, x, t):
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t, "iterate became non-finite")

    def record(self, t, x_out, step):
        if self.evaluator is None:
            return
        if t % self.every == 0 or t == self.cfg.iterations:
            value = float(self.evaluator(x_out))
            wall = (time.perf_counter() - self.t0) * 1e3
            self.trace.add(TraceRecord(t, self.evals, value, step, wall))


def _start(problem: Problem, cfg: SgmConfig, x0):
    radius = cfg.radius if cfg.radius is not None else problem.radius
    x = problem.initial_point() if x0 is None else np.asarray(x0, dtype=float).copy()
    return project_ball(x, radius).astype(float), radius


def run_sgm(problem: Problem, estimator: Estimator, cfg: SgmConfig, rng: np.random.Generator,
            x0=None, evaluator=None, eval_every: Optional[int] = None) -> Tuple[np.ndarray, RunTrace]:
    """Projected SGM ``x <- P(x - eta g)``; returns the configured average."""
    x, radius = _start(problem, cfg, x0)
    avg = _Averager(cfg.averaging, cfg.iterations)
    loop = _Loop(cfg, evaluator, eval_every)
    eta = cfg.step_size
    for t in range(1, cfg.iterations + 1):
        g = loop.grad(estimator, x, rng, t)
        x = project_ball(x - eta * g, radius)
        loop.check(x, t)
        avg.update(t, x)
        loop.record(t, avg.current(x), eta)
    return np.array(avg.current(x)), loop.trace


def run_nesterov(problem: Problem, estimator: Estimator, cfg: SgmConfig, rng: np.random.Generator,
                 x0=None, evaluator=None, eval_every: Optional[int] = None) -> Tuple[np.ndarray, RunTrace]:
    """Accelerated SGM; see the module docstring for the two variants."""
    x, radius = _start(problem, cfg, x0)
    avg = _Averager(cfg.averaging, cfg.iterations)
    loop = _Loop(cfg, evaluator, eval_every)
    eta = cfg.step_size
    if cfg.momentum == "nesterov":
        y = x.copy()
        z = x.copy()
        for t in range(1, cfg.iterations + 1):
            theta = nesterov_theta(t)
            g = loop.grad(estimator, x, rng, t)
            z = project_ball(z - (eta / theta) * g, radius)
            y = theta * z + (1.0 - theta) * y
            nxt = nesterov_theta(t + 1)
            x = nxt * z + (1.0 - nxt) * y
            loop.check(x, t)
            avg.update(t, y)
            loop.record(t, avg.current(y), eta)
        return np.array(avg.current(y)), loop.trace

    omega = float(cfg.momentum)
    v = np.zeros_like(x)
    for t in range(1, cfg.iterations + 1):
        g = loop.grad(estimator, x, rng, t)
        v = omega * v - eta * g
        # unconstrained recursion; projection afterwards when a ball is set
        x = project_ball(x + omega * v - eta * g, radius)
        loop.check(x, t)
        avg.update(t, x)
        loop.record(t, avg.current(x), eta)
    return np.array(avg.current(x)), loop.trace


def run_dual_sgm(problem: Problem, spec: RobustSpec, cfg: SgmConfig, rng: np.random.Generator,
                 eta_step: Optional[float] = None, x0=None, evaluator=None,
                 eval_every: Optional[int] = None) -> Tuple[np.ndarray, float, RunTrace]:
    """Joint SGM on ``(x, eta)`` over the dual objective, one sample per step.

    ``eta`` is kept in ``[0, B]`` for CVaR and ``[-lambda, B]`` for the
    chi2 penalty, which needs the problem's declared loss bound ``B``.
    """
    if spec.kind not in (Kind.CVAR, Kind.CHI2_PEN):
        raise ValueError("dual SGM supports cvar and chi2_pen only")
    if problem.bound_B is None:
        raise ValueError("dual SGM needs a declared loss bound B")
    B = problem.bound_B
    lo = 0.0 if spec.kind is Kind.CVAR else -spec.lam
    x, radius = _start(problem, cfg, x0)
    eta_dual = 0.5 * (lo + B)
    gamma_eta = eta_step if eta_step is not None else cfg.step_size
    avg = _Averager(cfg.averaging, cfg.iterations)
    loop = _Loop(cfg, evaluator, eval_every)
    for t in range(1, cfg.iterations + 1):
        gx, ge = dual_sgm_grad(problem, x, eta_dual, spec, rng)
        loop.evals += 1
        if not (np.all(np.isfinite(gx)) and math.isfinite(ge)):
            raise DivergenceError(t, "non-finite dual gradient")
        x = project_ball(x - cfg.step_size * gx, radius)
        eta_dual = min(max(eta_dual - gamma_eta * ge, lo), B)
        avg.update(t, x)
        loop.record(t, avg.current(x), cfg.step_size)
    return np.array(avg.current(x)), eta_dual, loop.trace
