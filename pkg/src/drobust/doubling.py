"""Constrained-chi2 minimization through the penalized dual over lambda.

``f(x, lam) = L_pen^lam(x) + lam * rho`` is jointly convex. The range
``[eps/(2 rho), B/rho]`` is split into factor-2 intervals; on each one the
pair ``(x, lam)`` is driven by projected SGM with MLMC estimates of both
partial derivatives, and the interval whose averaged point has the lowest
estimated ``f`` wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import RobustSpec
from .estimators import MlmcConfig, minibatch_estimate, mlmc_draw
from .inner import solve_arrays
from .optim import DivergenceError, RunTrace, TraceRecord, eval_cadence, project_ball
from .problems import Problem

BATCH_CAP = 1_000_000


@dataclass(frozen=True)
class IntervalPlan:
    """Per-interval run parameters; ``None`` fields take the plug-in defaults."""

    iterations: Optional[int] = None
    n0: Optional[int] = None
    n: Optional[int] = None
    step_x: Optional[float] = None
    step_lambda: Optional[float] = None
    max_iterations: int = 20_000

    def __post_init__(self):
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        for name in ("step_x", "step_lambda"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class DoublingConfig:
    rho: float
    epsilon: float
    B: float
    plan: IntervalPlan = field(default_factory=IntervalPlan)
    selection_reps: int = 9
    batch_const: float = 1.0
    batch_cap: int = BATCH_CAP

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.B > 0:
            raise ValueError("B must be positive")
        if not 0 < self.epsilon < self.B:
            raise ValueError(f"epsilon must lie in (0, B={self.B}), got {self.epsilon}")
        if self.selection_reps < 1:
            raise ValueError("selection_reps must be at least 1")

    @property
    def K(self) -> int:
        return num_intervals(self.B, self.epsilon)


def num_intervals(B: float, epsilon: float) -> int:
    return max(1, math.ceil(math.log2(2.0 * B / epsilon)) - 1)


def lambda_intervals(B: float, rho: float, epsilon: float) -> List[Tuple[float, float]]:
    """``[(lam_{i+1}, lam_i)]`` for ``i = 1..K`` with ``lam_i = (B/rho) 2^(1-i)``."""
    if not 0 < epsilon < B:
        raise ValueError(f"epsilon must lie in (0, B={B}), got {epsilon}")
    if not rho > 0:
        raise ValueError("rho must be positive")
    top = B / rho
    return [(top * 2.0 ** (-i), top * 2.0 ** (1 - i)) for i in range(1, num_intervals(B, epsilon) + 1)]


@dataclass(frozen=True)
class ResolvedPlan:
    iterations: int
    mlmc: MlmcConfig
    step_x: float
    step_lambda: float


def resolve_plan(problem: Problem, interval: Tuple[float, float], cfg: DoublingConfig) -> ResolvedPlan:
    """Unit-constant choices: ``n ~ B/(lo eps)``, ``n0 ~ (B/lo) log n`` and
    ``T ~ ((GR)^2 + Gamma_lam^2 hi^2) / eps^2`` with ``Gamma_lam^2 = B^2/lo^2 + rho^2``.

    Steps are ``R/(Gamma_x sqrt T)`` and ``(hi - lo)/(Gamma_lam sqrt T)``.
    """
    lo, hi = interval
    plan = cfg.plan
    B, eps, rho = cfg.B, cfg.epsilon, cfg.rho
    G = problem.bound_G if problem.bound_G else 1.0
    R = problem.radius if problem.radius is not None else 1.0
    n_target = plan.n if plan.n is not None else max(2, math.ceil(B / (lo * eps)))
    n0 = plan.n0 if plan.n0 is not None else max(1, math.ceil(B / lo * math.log(max(n_target, 2))))
    n0 = min(n0, max(1, n_target // 2))
    mlmc = MlmcConfig.rounded(n0, n_target, warn=False) if plan.n is None else MlmcConfig(n0, n_target)
    gamma_lam = math.sqrt((B / lo) ** 2 + rho ** 2)
    if plan.iterations is not None:
        T = plan.iterations
    else:
        T = math.ceil(((G * R) ** 2 + (gamma_lam * hi) ** 2) / eps ** 2)
        T = min(T, plan.max_iterations)
    step_x = plan.step_x if plan.step_x is not None else R / (G * math.sqrt(T))
    step_lam = plan.step_lambda if plan.step_lambda is not None else (hi - lo) / (gamma_lam * math.sqrt(T))
    return ResolvedPlan(T, mlmc, step_x, step_lam)


def f_rho(problem: Problem, x, lam: float, rho: float) -> float:
    """Exact ``L_pen^lam(x) + lam rho`` on a finite support."""
    values = problem.losses(x, problem.atoms())
    return solve_arrays(values, RobustSpec.chi2_pen(lam), p=problem.probs)[2] + lam * rho


def joint_xlambda_sgm(problem: Problem, interval: Tuple[float, float], cfg: DoublingConfig,
                      rng: np.random.Generator, plan: Optional[ResolvedPlan] = None,
                      x0=None) -> Tuple[np.ndarray, float, RunTrace, int]:
    """Projected SGM on ``(x, lam)`` over ``ball x [lo, hi]``.

    Returns the averaged ``x``, averaged ``lam``, the trace (exact ``f`` for
    finite problems, else empty) and the gradient evaluations spent.
    """
    lo, hi = interval
    if not 0 < lo <= hi:
        raise ValueError(f"invalid lambda interval {interval}")
    plan = plan or resolve_plan(problem, interval, cfg)
    radius = problem.radius
    x = project_ball(problem.initial_point() if x0 is None else np.asarray(x0, float), radius)
    lam = 0.5 * (lo + hi)
    x_bar = np.zeros_like(x)
    lam_bar = 0.0
    trace = RunTrace()
    every = eval_cadence(plan.iterations)
    evals = 0
    for t in range(1, plan.iterations + 1):
        d = mlmc_draw(problem, x, RobustSpec.chi2_pen(lam), plan.mlmc, rng)
        evals += d.grad_evals
        if not (np.all(np.isfinite(d.grad)) and math.isfinite(d.lambda_deriv)):
            raise DivergenceError(t, "non-finite MLMC estimate")
        x = project_ball(x - plan.step_x * d.grad, radius)
        lam = min(max(lam - plan.step_lambda * (d.lambda_deriv + cfg.rho), lo), hi)
        x_bar += (x - x_bar) / t
        lam_bar += (lam - lam_bar) / t
        if problem.finite and (t % every == 0 or t == plan.iterations):
            trace.add(TraceRecord(t, evals, f_rho(problem, x_bar, lam_bar, cfg.rho), plan.step_x, 0.0))
    return x_bar, float(lam_bar), trace, evals


def selection_batch(lam: float, cfg: DoublingConfig) -> int:
    return int(min(cfg.batch_cap, max(1, math.ceil(cfg.batch_const * cfg.B ** 2 / (lam * cfg.epsilon ** 2)))))


def estimate_f(problem: Problem, x, lam: float, cfg: DoublingConfig, batch: int,
               rng: np.random.Generator) -> Tuple[float, int]:
    """Median over ``selection_reps`` minibatch values of ``f(x, lam)``."""
    spec = RobustSpec.chi2_pen(lam)
    vals = [minibatch_estimate(problem, x, spec, batch, rng).value_estimate
            for _ in range(cfg.selection_reps)]
    return float(np.median(vals)) + lam * cfg.rho, batch * cfg.selection_reps


@dataclass
class IntervalResult:
    index: int
    interval: Tuple[float, float]
    x_bar: np.ndarray
    lambda_hat: float
    estimate: float
    iterations: int
    n0: int
    n: int
    train_evals: int
    select_evals: int
    planned_evals: float
    trace: RunTrace


@dataclass
class DoublingReport:
    K: int
    intervals: List[Tuple[float, float]]
    results: List[IntervalResult] = field(default_factory=list)
    selected: Optional[int] = None

    @property
    def grad_evals(self) -> int:
        return sum(r.train_evals + r.select_evals for r in self.results)

    @property
    def planned_evals(self) -> float:
        """Expected cost of the configured runs: ``T n0 (1 + log2(n/n0))`` plus selection."""
        return sum(r.planned_evals for r in self.results)

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "selected": self.selected,
            "grad_evals": self.grad_evals,
            "planned_evals": self.planned_evals,
            "intervals": [
                {"index": r.index, "lambda_lo": r.interval[0], "lambda_hi": r.interval[1],
                 "lambda_hat": r.lambda_hat, "estimate": r.estimate, "iterations": r.iterations,
                 "n0": r.n0, "n": r.n, "train_evals": r.train_evals, "select_evals": r.select_evals}
                for r in self.results
            ],
        }


class DoublingError(RuntimeError):
    def __init__(self, message: str, report: DoublingReport):
        super().__init__(message)
        self.report = report


def doubling_minimize(problem: Problem, cfg: DoublingConfig,
                      rng: np.random.Generator) -> Tuple[np.ndarray, DoublingReport]:
    """Run every interval, then return the averaged point with the lowest estimate.

    Each interval gets two child streams (training and selection) spawned from
    ``rng``, so results do not depend on how many intervals ran before.
    """
    intervals = lambda_intervals(cfg.B, cfg.rho, cfg.epsilon)
    report = DoublingReport(K=len(intervals), intervals=intervals)
    children = rng.spawn(2 * len(intervals))
    for i, interval in enumerate(intervals, start=1):
        plan = resolve_plan(problem, interval, cfg)
        try:
            x_bar, lam_hat, trace, evals = joint_xlambda_sgm(
                problem, interval, cfg, children[2 * i - 2], plan)
            batch = selection_batch(lam_hat, cfg)
            est, sel_evals = estimate_f(problem, x_bar, lam_hat, cfg, batch, children[2 * i - 1])
        except (FloatingPointError, ValueError) as exc:
            raise DoublingError(f"interval {i} {interval} failed: {exc}", report) from exc
        planned = plan.iterations * plan.mlmc.expected_cost() + sel_evals
        report.results.append(IntervalResult(
            i, interval, x_bar, lam_hat, est, plan.iterations, plan.mlmc.n0, plan.mlmc.n,
            evals, sel_evals, planned, trace))
    best = min(report.results, key=lambda r: r.estimate)
    report.selected = best.index
    return best.x_bar.copy(), report


def theory_budget(B: float, rho: float, epsilon: float, G: float, R: float) -> float:
    """Total gradient evaluations from the complexity bound with unit constants."""
    K = num_intervals(B, epsilon)
    log2 = math.log(1 + rho * B / epsilon ** 2) ** 2
    return sum((1 + rho * B / (2 ** (K - i) * epsilon)) * ((G * R) ** 2 + B ** 2) / epsilon ** 2 * log2
               for i in range(1, K + 1))
