"""Ground truth for checking the solvers and estimators.

Nothing in here is used by the optimization path itself; these routines
are deliberately simple (exhaustive grids, binomial sums, plain Monte
Carlo) so they can serve as independent references.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.stats import binom

from .core import InnerSolution, Kind, RobustSpec, Weights
from .inner import solve_arrays
from .problems import Problem


def full_batch(problem: Problem, x, spec: RobustSpec) -> InnerSolution:
    """Exact robust value under the problem's (finite) distribution."""
    sol, _ = full_batch_subgradient(problem, x, spec)
    return sol


def full_batch_subgradient(problem: Problem, x, spec: RobustSpec) -> Tuple[InnerSolution, np.ndarray]:
    if not problem.finite:
        raise ValueError("full-batch evaluation needs a finite-support problem")
    values, grads = problem.loss_grad(x, problem.atoms())
    q, eta, value = solve_arrays(values, spec, p=problem.probs)
    return InnerSolution(Weights(q), eta, value), q @ grads


def full_batch_value(problem: Problem, x, spec: RobustSpec) -> float:
    if not problem.finite:
        raise ValueError("full-batch evaluation needs a finite-support problem")
    values = problem.losses(x, problem.atoms())
    return solve_arrays(values, spec, p=problem.probs)[2]


def _compositions(m: int, n: int):
    """All integer vectors of length n, entries >= 0, summing to m, in chunks."""
    if n == 1:
        yield np.array([[m]])
        return
    if n == 2:
        i = np.arange(m + 1)
        yield np.stack([i, m - i], axis=1)
        return
    for first in range(m + 1):
        for rest in _compositions(m - first, n - 1):
            yield np.hstack([np.full((rest.shape[0], 1), first), rest])


def _compositions3(m: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    i, j = i[keep], j[keep]
    return np.stack([i, j, m - i - j], axis=1)


def simplex_grid_max(values, spec: RobustSpec, resolution: float = 2e-3) -> float:
    """Brute-force maximum of the primal objective over a grid on the simplex.

    Only for ``n <= 4``. The result is a lower bound on the true value and
    is within roughly ``max|l| * resolution`` of it.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    n = values.size
    if n > 4:
        raise ValueError("grid search is limited to n <= 4")
    m = int(round(1.0 / resolution))
    chunks = [_compositions3(m)] if n == 3 else _compositions(m, n)
    best = -math.inf
    for counts in chunks:
        q = counts / m
        obj = q @ values
        t = q * n
        if spec.kind in (Kind.CVAR, Kind.KL_CVAR):
            feasible = np.all(t <= 1.0 / spec.alpha + 1e-12, axis=1)
        elif spec.kind is Kind.CHI2_CON:
            feasible = 0.5 * np.mean((t - 1.0) ** 2, axis=1) <= spec.rho + 1e-12
        else:
            feasible = np.ones(q.shape[0], dtype=bool)
        if spec.kind is Kind.KL_CVAR:
            tlogt = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
            obj = obj - spec.lam * np.mean(tlogt - t + 1.0, axis=1)
        elif spec.kind is Kind.CHI2_PEN:
            obj = obj - spec.lam * 0.5 * np.mean((t - 1.0) ** 2, axis=1)
        if feasible.any():
            best = max(best, float(obj[feasible].max()))
    return best


def bernoulli_cvar_surrogate(alpha: float, n: int, B: float = 1.0) -> float:
    """Expected empirical CVaR of n Bernoulli(alpha) draws scaled by B.

    With K ones among n draws the empirical CVaR is ``B min(1, K/(alpha n))``;
    the expectation is a finite binomial sum.
    """
    if n > 10_000:
        raise ValueError("exact summation is limited to n <= 10^4")
    k = np.arange(n + 1)
    pmf = binom.pmf(k, n, alpha)
    return float(B * np.sum(pmf * np.minimum(1.0, k / (alpha * n))))


def bernoulli_surrogate(spec: RobustSpec, p0: float, n: int, B: float = 1.0) -> float:
    """Expected batch robust value for losses ``B * Bernoulli(p0)``, any objective.

    A batch with K ones has the same robust value as the two-atom
    distribution with masses ``(n - K)/n`` and ``K/n``.
    """
    total = 0.0
    for k, w in enumerate(binom.pmf(np.arange(n + 1), n, p0)):
        if k == 0 or k == n:
            value = 0.0 if k == 0 else B
        else:
            value = solve_arrays(np.array([0.0, B]), spec, p=np.array([n - k, k]) / n)[2]
        total += w * value
    return float(total)


def batch_values(problem: Problem, x, spec: RobustSpec, n: int, reps: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Robust values of ``reps`` independent batches of size ``n``."""
    samples = problem.sample(rng, n * reps)
    out = np.empty(reps)
    for r in range(reps):
        out[r] = solve_arrays(problem.losses(x, samples[r * n:(r + 1) * n]), spec)[2]
    return out


def batch_grads(problem: Problem, x, spec: RobustSpec, n: int, reps: int,
                rng: np.random.Generator) -> np.ndarray:
    out = np.empty((reps, problem.dim))
    for r in range(reps):
        samples = problem.sample(rng, n)
        values, grads = problem.loss_grad(x, samples)
        q = solve_arrays(values, spec)[0]
        out[r] = q @ grads
    return out


def mc_bias_estimate(problem: Problem, x, spec: RobustSpec, n: int, reps: int,
                     rng: np.random.Generator) -> Tuple[float, float]:
    """Monte Carlo mean (and its standard error) of the batch robust value."""
    if reps < 2:
        raise ValueError("need at least two repetitions")
    vals = batch_values(problem, x, spec, n, reps, rng)
    if np.all(vals == vals[0]):
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(reps))


def mc_variance_estimate(problem: Problem, x, spec: RobustSpec, n: int, reps: int,
                         rng: np.random.Generator) -> float:
    """Trace of the covariance of the batch robust gradient."""
    if reps < 2:
        raise ValueError("need at least two repetitions")
    g = batch_grads(problem, x, spec, n, reps, rng)
    if np.all(g == g[0]):
        return 0.0
    return float(np.sum(g.var(axis=0, ddof=1)))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def _project(x, radius):
    if radius is None:
        return x
    nrm = np.linalg.norm(x)
    return x if nrm <= radius else x * (radius / nrm)


def full_batch_reference(problem: Problem, spec: RobustSpec, iterations: int = 100_000,
                         x0=None, step: Optional[float] = None) -> Tuple[np.ndarray, float, int]:
    """Projected full-batch subgradient descent with steps ``step / sqrt(t)``.

    Returns the best iterate, its exact value, and the number of gradient
    evaluations spent (``iterations * N``). ``step`` defaults to ``R / G``.
    """
    x = problem.initial_point() if x0 is None else np.asarray(x0, dtype=float).copy()
    if step is None:
        R = problem.radius if problem.radius is not None else 1.0
        G = problem.bound_G if problem.bound_G else 1.0
        step = R / G
    atoms = problem.atoms()
    best_x, best_val = x.copy(), math.inf
    for t in range(1, iterations + 1):
        values, grads = problem.loss_grad(x, atoms)
        q, _, value = solve_arrays(values, spec, p=problem.probs)
        if value < best_val:
            best_val, best_x = value, x.copy()
        x = _project(x - step / math.sqrt(t) * (q @ grads), problem.radius)
    final = full_batch_value(problem, x, spec)
    if final < best_val:
        best_val, best_x = final, x
    return best_x, float(best_val), iterations * problem.n_atoms


def chi2_bound(spec: RobustSpec, B: float) -> float:
    """Bound on the chi2 divergence of any maximizer (the chi2-bounded constants)."""
    if spec.kind in (Kind.CVAR, Kind.KL_CVAR):
        return 1.0 / spec.alpha - 1.0
    if spec.kind is Kind.CHI2_CON:
        return spec.rho
    return B / spec.lam


__all__ = [
    "full_batch", "full_batch_subgradient", "full_batch_value", "simplex_grid_max",
    "bernoulli_cvar_surrogate", "bernoulli_surrogate", "mc_bias_estimate",
    "mc_variance_estimate", "finite_diff_grad", "full_batch_reference", "chi2_bound",
]
