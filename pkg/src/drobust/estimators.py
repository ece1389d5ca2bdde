"""Stochastic gradient and value estimators for the robust objectives."""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import EstimatorOutput, Kind, RobustSpec, chi2_divergence
from .inner import solve_arrays
from .problems import Problem


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *keys)``.

    Streams with different keys are statistically independent, so callers
    can hand one to each estimator call, interval or repetition without
    coordinating state.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


class Target(str, enum.Enum):
    GRAD = "grad"
    VALUE = "value"
    LAMBDA_DERIV = "lambda_deriv"


@dataclass(frozen=True)
class MlmcConfig:
    """Smallest batch ``n0`` and largest batch ``n = 2**j_max * n0``."""

    n0: int
    n: int

    def __post_init__(self):
        if self.n0 < 1:
            raise ValueError("n0 must be at least 1")
        ratio = self.n // self.n0
        if self.n % self.n0 or ratio < 2 or ratio & (ratio - 1):
            raise ValueError(f"n/n0 must be a power of two >= 2, got n={self.n}, n0={self.n0}")

    @classmethod
    def rounded(cls, n0: int, n: int, warn: bool = True) -> "MlmcConfig":
        """Build a config, rounding ``n`` up to the next dyadic multiple of ``n0``."""
        n0 = int(n0)
        ratio = max(2, math.ceil(n / n0))
        pow2 = 1 << (ratio - 1).bit_length()
        if warn and pow2 * n0 != n:
            warnings.warn(f"MLMC cap n={n} rounded up to {pow2 * n0} = 2^k * n0", stacklevel=2)
        return cls(n0, pow2 * n0)

    @property
    def j_max(self) -> int:
        return (self.n // self.n0).bit_length() - 1

    def expected_cost(self) -> float:
        return self.n0 * (1.0 + self.j_max)


def level_distribution(cfg: MlmcConfig) -> List[Tuple[int, float]]:
    """P(J = j) = 2^(-j) for j < j_max, and 2^(1 - j_max) at j_max."""
    jm = cfg.j_max
    return [(j, 2.0 ** (-j + (1 if j == jm else 0))) for j in range(1, jm + 1)]


def draw_level(cfg: MlmcConfig, rng: np.random.Generator) -> int:
    return min(int(rng.geometric(0.5)), cfg.j_max)


def _check_spec_target(spec: RobustSpec, target: Target) -> None:
    if target is Target.LAMBDA_DERIV and spec.kind is not Kind.CHI2_PEN:
        raise ValueError("the lambda derivative is only defined for the chi2-penalized objective")


def _batch_quantities(values, grads, spec: RobustSpec, want_lambda: bool):
    q, _, value = solve_arrays(values, spec)
    grad = q @ grads
    lam_d = -chi2_divergence(q) if want_lambda else None
    return grad, value, lam_d


def minibatch_estimate(problem: Problem, x, spec: RobustSpec, n: int,
                       rng: np.random.Generator) -> EstimatorOutput:
    """Robust (sub)gradient and value of one i.i.d. batch of size ``n``."""
    if n < 1:
        raise ValueError("batch size must be at least 1")
    samples = problem.sample(rng, n)
    values, grads = problem.loss_grad(x, samples)
    want = spec.kind is Kind.CHI2_PEN
    grad, value, lam_d = _batch_quantities(values, grads, spec, want)
    return EstimatorOutput(grad, value, n, lam_d)


@dataclass(frozen=True)
class MlmcDraw:
    """All MLMC estimates from one level draw (they share the sample)."""

    level: int
    grad: np.ndarray
    value: float
    lambda_deriv: Optional[float]
    base_grad: np.ndarray
    base_value: float
    grad_evals: int


def mlmc_draw(problem: Problem, x, spec: RobustSpec, cfg: MlmcConfig,
              rng: np.random.Generator, level: Optional[int] = None) -> MlmcDraw:
    """Draw J and 2^J n0 samples, and form the telescoped estimates.

    The base term reuses the first ``n0`` samples of the level batch.
    ``level`` forces J (for tests); the weight 1/q(J) still applies.
    """
    j = draw_level(cfg, rng) if level is None else int(level)
    weight = 1.0 / dict(level_distribution(cfg))[j]
    k = (1 << j) * cfg.n0
    samples = problem.sample(rng, k)
    values, grads = problem.loss_grad(x, samples)
    want = spec.kind is Kind.CHI2_PEN
    half = k // 2

    full = _batch_quantities(values, grads, spec, want)
    left = _batch_quantities(values[:half], grads[:half], spec, want)
    right = _batch_quantities(values[half:], grads[half:], spec, want)
    if half == cfg.n0:
        base = left
    else:
        base = _batch_quantities(values[:cfg.n0], grads[:cfg.n0], spec, want)

    def combine(i):
        if full[i] is None:
            return None
        return base[i] + weight * (full[i] - 0.5 * (left[i] + right[i]))

    return MlmcDraw(j, combine(0), float(combine(1)),
                    None if not want else float(combine(2)),
                    base[0], float(base[1]), k)


def mlmc_estimate(problem: Problem, x, spec: RobustSpec, cfg: MlmcConfig,
                  target: Target, rng: np.random.Generator) -> EstimatorOutput:
    """Unbiased estimate of the batch-size-``n`` quantity at logarithmic cost.

    For ``GRAD`` the reported value is the base-level value (a cheap,
    biased diagnostic). For ``VALUE`` and ``LAMBDA_DERIV`` the gradient slot
    carries the base-level gradient.
    """
    target = Target(target)
    _check_spec_target(spec, target)
    d = mlmc_draw(problem, x, spec, cfg, rng)
    if target is Target.GRAD:
        return EstimatorOutput(d.grad, d.base_value, d.grad_evals, d.lambda_deriv)
    if target is Target.VALUE:
        return EstimatorOutput(d.base_grad, d.value, d.grad_evals, d.lambda_deriv)
    return EstimatorOutput(d.base_grad, d.base_value, d.grad_evals, d.lambda_deriv)


def dual_sgm_grad(problem: Problem, x, eta: float, spec: RobustSpec,
                  rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """Single-sample gradient of the dual objective in ``(x, eta)``."""
    samples = problem.sample(rng, 1)
    values, grads = problem.loss_grad(x, samples)
    return dual_sgm_grad_from(values[0], grads[0], eta, spec)


def dual_sgm_grad_from(loss: float, grad, eta: float, spec: RobustSpec) -> Tuple[np.ndarray, float]:
    if spec.kind is Kind.CVAR:
        mult = (1.0 / spec.alpha) if loss >= eta else 0.0
    elif spec.kind is Kind.CHI2_PEN:
        mult = max((loss - eta) / spec.lam, 0.0)
    else:
        raise ValueError(f"dual SGM supports cvar and chi2_pen, not {spec.kind.value}")
    return mult * np.asarray(grad, dtype=float), 1.0 - mult


Estimator = Callable[[np.ndarray, np.random.Generator], EstimatorOutput]


def make_estimator(problem: Problem, spec: RobustSpec, kind: str = "minibatch",
                   n: int = 10, n0: Optional[int] = None) -> Estimator:
    """Bind an estimator to a problem and objective for the optimizers."""
    if kind == "minibatch":
        return lambda x, rng: minibatch_estimate(problem, x, spec, n, rng)
    if kind == "mlmc":
        cfg = MlmcConfig.rounded(n0 if n0 is not None else 1, n)
        return lambda x, rng: mlmc_estimate(problem, x, spec, cfg, Target.GRAD, rng)
    raise ValueError(f"unknown estimator type {kind!r}")
