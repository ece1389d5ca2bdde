"""Exact inner maximization over the simplex.

Every solver takes the loss values of a sample and returns the maximizing
weights ``q``, the optimal multiplier ``eta`` of the constraint
``sum(q) = 1`` and the robust value. Solvers also accept a reference
distribution ``p`` (atom probabilities); the default is the uniform
empirical distribution. Ties between equal losses are broken by a stable
descending sort, so the lowest index wins.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .core import (
    InnerSolution,
    Kind,
    LossBatch,
    RobustSpec,
    Weights,
    chi2_divergence,
    kl_divergence,
)

ArrayOrBatch = Union[LossBatch, np.ndarray, list, tuple]
Triple = Tuple[np.ndarray, float, float]


class BisectionError(RuntimeError):
    """Raised when bisection fails to reach tolerance; carries the last bracket."""

    def __init__(self, message: str, bracket: Tuple[float, float]):
        super().__init__(f"{message}; last bracket [{bracket[0]!r}, {bracket[1]!r}]")
        self.bracket = bracket


@dataclass(frozen=True)
class BisectionConfig:
    """Bisection controls for the dual variable.

    ``tol_eta=None`` means 1e-10 times the loss range (floored at 1e-12).
    """

    tol_eta: Optional[float] = None
    max_iters: int = 200

    def __post_init__(self):
        if self.tol_eta is not None and not self.tol_eta > 0:
            raise ValueError("tol_eta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    def tol_for(self, scale: float) -> float:
        if self.tol_eta is not None:
            return self.tol_eta
        return max(1e-10 * scale, 1e-12)


DEFAULT_BISECTION = BisectionConfig()


def bisect_increasing(fn: Callable[[float], float], lo: float, hi: float,
                      tol: float, max_iters: int) -> float:
    """Root of a nondecreasing function with fn(lo) <= 0 <= fn(hi)."""
    for _ in range(max_iters):
        if hi - lo <= tol:
            return 0.5 * (lo + hi)
        mid = 0.5 * (lo + hi)
        if fn(mid) > 0:
            hi = mid
        else:
            lo = mid
    if hi - lo <= tol:
        return 0.5 * (lo + hi)
    raise BisectionError(f"bisection did not converge in {max_iters} iterations", (lo, hi))


def _values(batch: ArrayOrBatch) -> np.ndarray:
    if isinstance(batch, LossBatch):
        return batch.values
    v = np.asarray(batch, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValueError("loss batch is empty")
    return v


def _probs(p, n: int) -> np.ndarray:
    if p is None:
        return np.full(n, 1.0 / n)
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size != n or np.any(p <= 0):
        raise ValueError("atom probabilities must be positive with one entry per loss")
    return p / p.sum()


def _order(values: np.ndarray) -> np.ndarray:
    return np.argsort(-values, kind="stable")


# --------------------------------------------------------------------------
# objectives on both sides of the duality


def primal_value(values, q, spec: RobustSpec, p=None) -> float:
    """sum_i q_i l_i minus the penalty term of the objective at ``q``."""
    values = _values(values)
    q = q.q if isinstance(q, Weights) else np.asarray(q, dtype=float)
    p = _probs(p, values.size)
    val = float(q @ values)
    if spec.kind is Kind.KL_CVAR:
        val -= spec.lam * kl_divergence(q, p)
    elif spec.kind is Kind.CHI2_PEN:
        val -= spec.lam * chi2_divergence(q, p)
    return val


def _kl_conj(v: np.ndarray, alpha: float) -> np.ndarray:
    cut = math.log(1.0 / alpha)
    below = np.expm1(np.minimum(v, cut))
    above = 1.0 / alpha - 1.0 + (v - cut) / alpha
    return np.where(v < cut, below, above)


def dual_value(values, eta: float, spec: RobustSpec, p=None) -> float:
    """Dual objective at ``eta``; its infimum over ``eta`` is the robust value."""
    values = _values(values)
    p = _probs(p, values.size)
    if spec.kind is Kind.CVAR:
        return float(p @ np.maximum(values - eta, 0.0) / spec.alpha + eta)
    if spec.kind is Kind.KL_CVAR:
        lam = spec.lam
        return float(lam * (p @ _kl_conj((values - eta) / lam, spec.alpha)) + eta)
    if spec.kind is Kind.CHI2_PEN:
        lam = spec.lam
        return float(p @ np.maximum(values - eta, 0.0) ** 2 / (2 * lam) + lam / 2 + eta)
    if eta == -math.inf:
        return float(p @ values)
    second = p @ np.maximum(values - eta, 0.0) ** 2
    return float(math.sqrt(1.0 + 2.0 * spec.rho) * math.sqrt(second) + eta)


# --------------------------------------------------------------------------
# raw solvers on arrays; return (q, eta, value)


def _constant(values: np.ndarray, p: np.ndarray, spec: RobustSpec) -> Optional[Triple]:
    lo, hi = values.min(), values.max()
    if hi > lo:
        return None
    c0 = float(hi)
    eta = c0 - spec.lam if spec.kind is Kind.CHI2_PEN else c0
    return p.copy(), eta, c0


def _cvar(values: np.ndarray, alpha: float, p: np.ndarray) -> Triple:
    n = values.size
    order = _order(values)
    caps = p[order] / alpha
    csum = np.cumsum(caps)
    # m: number of atoms that receive their full cap
    m = int(np.searchsorted(csum, 1.0 + 1e-12, side="right"))
    m = min(m, n)
    q_sorted = np.zeros(n)
    q_sorted[:m] = caps[:m]
    if m < n:
        q_sorted[m] = max(1.0 - (csum[m - 1] if m > 0 else 0.0), 0.0)
        eta = float(values[order[m]])
    else:
        eta = float(values[order[-1]])
    q = np.empty(n)
    q[order] = q_sorted
    q /= q.sum()
    return q, eta, float(q @ values)


def _kl_cvar(values: np.ndarray, alpha: float, lam: float, p: np.ndarray,
             cfg: BisectionConfig) -> Triple:
    cut = math.log(1.0 / alpha)
    logp = np.log(p)

    def ratio(eta):
        return np.exp(np.minimum((values - eta) / lam, cut))

    def excess(eta):
        # decreasing in eta; negate for the increasing-root bisection
        return -(p @ ratio(eta) - 1.0)

    lo, hi = float(values.min()), float(values.max())
    tol = cfg.tol_for(hi - lo)
    eta = bisect_increasing(excess, lo, hi, tol, cfg.max_iters)

    # polish: with the capped set fixed the root has a closed form
    capped = (values - eta) >= lam * cut
    cap_mass = p[capped].sum() / alpha
    if (~capped).any() and cap_mass < 1.0:
        polished = lam * (logsumexp(logp[~capped] + values[~capped] / lam)
                          - math.log1p(-cap_mass))
        if abs(polished - eta) <= 10 * tol + 1e-12:
            eta = float(polished)
    q = p * ratio(eta)
    q /= q.sum()
    return q, float(eta), primal_value(values, q, RobustSpec.kl_cvar(alpha, lam), p)


def chi2_pen_eta_prefix(values: np.ndarray, lam: float, p: np.ndarray) -> float:
    """Solve sum_i p_i (l_i - eta)_+ = lam with sorted prefix sums."""
    order = _order(values)
    v = values[order]
    w = p[order]
    mass = np.cumsum(w)
    first = np.cumsum(w * v)
    # f(v_k) = sum_{j<k} w_j (v_j - v_k) - lam; eta < v_k iff f(v_k) < 0
    f = np.concatenate(([0.0], first[:-1])) - v * np.concatenate(([0.0], mass[:-1])) - lam
    k = int(np.count_nonzero(f < 0))
    return float((first[k - 1] - lam) / mass[k - 1])


def chi2_pen_eta_bisect(values: np.ndarray, lam: float, p: np.ndarray,
                        cfg: BisectionConfig = DEFAULT_BISECTION) -> float:
    """Bisection route to the same root; used to cross-check the prefix formula."""
    lo, hi = float(values.min()) - lam, float(values.max())
    tol = cfg.tol_for(hi - lo)
    return bisect_increasing(lambda e: lam - p @ np.maximum(values - e, 0.0),
                             lo, hi, tol, cfg.max_iters)


def _chi2_pen(values: np.ndarray, lam: float, p: np.ndarray,
              cross_check: bool = False) -> Triple:
    eta = chi2_pen_eta_prefix(values, lam, p)
    if cross_check:
        other = chi2_pen_eta_bisect(values, lam, p)
        if abs(other - eta) > 1e-8 * max(1.0, values.max() - values.min() + lam):
            raise AssertionError(f"prefix eta {eta!r} disagrees with bisection {other!r}")
    q = p * np.maximum(values - eta, 0.0) / lam
    q /= q.sum()
    return q, eta, primal_value(values, q, RobustSpec.chi2_pen(lam), p)


def _chi2_con(values: np.ndarray, rho: float, p: np.ndarray,
              cfg: BisectionConfig) -> Triple:
    n = values.size
    if rho == 0.0:
        return p.copy(), -math.inf, float(p @ values)
    c = 1.0 + 2.0 * rho
    order = _order(values)
    top = values[order[0]]
    first = order[0]
    if c * p[first] >= 1.0:
        q = np.zeros(n)
        q[first] = 1.0
        return q, float(top), float(top)
    tied = values == top
    p_top = p[tied].sum()
    if c * p_top >= 1.0:
        q = np.where(tied, p, 0.0) / p_top
        return q, float(top), float(top)

    sqrt_c = math.sqrt(c)

    def slope(eta):
        gap = np.maximum(values - eta, 0.0)
        m1 = p @ gap
        m2 = p @ gap ** 2
        return 1.0 - sqrt_c * m1 / math.sqrt(m2)

    mean = float(p @ values)
    var = float(p @ (values - mean) ** 2)
    lo = min(float(values.min()), mean - math.sqrt(var / (2.0 * rho))) - 1e-9
    hi = float(top)
    width = max(hi - lo, 1e-12)
    while slope(lo) > 0:
        lo -= width
        width *= 2.0
    tol = cfg.tol_for(hi - lo)
    eta = bisect_increasing(slope, lo, hi, tol, cfg.max_iters)

    # polish: on the active set the optimality condition is a quadratic in eta
    active = values > eta
    m0 = p[active].sum()
    m1 = p[active] @ values[active]
    m2 = p[active] @ values[active] ** 2
    a = m0 * (1.0 - c * m0)
    b = 2.0 * m1 * (c * m0 - 1.0)
    cc = m2 - c * m1 * m1
    roots = []
    if abs(a) > 1e-14:
        disc = b * b - 4 * a * cc
        if disc >= 0:
            s = math.sqrt(disc)
            roots = [(-b + s) / (2 * a), (-b - s) / (2 * a)]
    elif abs(b) > 1e-14:
        roots = [-cc / b]
    if roots:
        best = min(roots, key=lambda r: abs(r - eta))
        if abs(best - eta) <= 10 * tol + 1e-12:
            eta = float(best)
    gap = np.maximum(values - eta, 0.0)
    q = p * gap / (p @ gap)
    q /= q.sum()
    return q, float(eta), float(q @ values)


# Test-only fault injection: a nonzero shift is added to every robust value
# returned by the dispatcher. Set through ``drobust.verify.injected_fault``.
_FAULT_SHIFT = 0.0


def solve_arrays(values: np.ndarray, spec: RobustSpec, p=None,
                 cfg: BisectionConfig = DEFAULT_BISECTION) -> Triple:
    """Array-level dispatcher: returns ``(q, eta, value)`` without wrapping."""
    if _FAULT_SHIFT:
        q, eta, value = _dispatch(values, spec, p, cfg)
        return q, eta, value + _FAULT_SHIFT
    return _dispatch(values, spec, p, cfg)


def _dispatch(values, spec: RobustSpec, p, cfg: BisectionConfig) -> Triple:
    values = _values(values)
    p = _probs(p, values.size)
    const = _constant(values, p, spec)
    if const is not None:
        return const
    if spec.kind is Kind.CVAR:
        return _cvar(values, spec.alpha, p)
    if spec.kind is Kind.KL_CVAR:
        return _kl_cvar(values, spec.alpha, spec.lam, p, cfg)
    if spec.kind is Kind.CHI2_PEN:
        return _chi2_pen(values, spec.lam, p)
    return _chi2_con(values, spec.rho, p, cfg)


def _wrap(triple: Triple) -> InnerSolution:
    q, eta, value = triple
    return InnerSolution(Weights(q), float(eta), float(value))


# --------------------------------------------------------------------------
# public solvers


def solve(batch: ArrayOrBatch, spec: RobustSpec, p=None,
          cfg: BisectionConfig = DEFAULT_BISECTION) -> InnerSolution:
    return _wrap(solve_arrays(_values(batch), spec, p, cfg))


def solve_cvar(batch: ArrayOrBatch, alpha: float, p=None) -> InnerSolution:
    """Greedy fill: the largest losses get weight p_i/alpha until the mass is spent."""
    return solve(batch, RobustSpec.cvar(alpha), p)


def solve_kl_cvar(batch: ArrayOrBatch, alpha: float, lam: float, p=None,
                  cfg: BisectionConfig = DEFAULT_BISECTION) -> InnerSolution:
    return solve(batch, RobustSpec.kl_cvar(alpha, lam), p, cfg)


def solve_chi2_pen(batch: ArrayOrBatch, lam: float, p=None,
                   cross_check: bool = False) -> InnerSolution:
    values = _values(batch)
    spec = RobustSpec.chi2_pen(lam)
    pp = _probs(p, values.size)
    const = _constant(values, pp, spec)
    if const is not None:
        return _wrap(const)
    return _wrap(_chi2_pen(values, spec.lam, pp, cross_check=cross_check))


def solve_chi2_con(batch: ArrayOrBatch, rho: float, p=None,
                   cfg: BisectionConfig = DEFAULT_BISECTION) -> InnerSolution:
    return solve(batch, RobustSpec.chi2_con(rho), p, cfg)


def robust_grad_from_inner(batch: LossBatch, sol: InnerSolution) -> np.ndarray:
    """Subgradient of the robust loss: the q*-weighted sum of per-sample gradients."""
    if batch.grads is None:
        raise ValueError("batch carries no per-sample gradients")
    if batch.n != sol.weights.n:
        raise ValueError("solution and batch have different sizes")
    return sol.weights.q @ batch.grads


def lambda_derivative(batch: ArrayOrBatch, lam: float, p=None) -> float:
    """d/d(lambda) of the chi2-penalized value, i.e. minus the chi2 divergence of q*."""
    values = _values(batch)
    pp = _probs(p, values.size)
    q, _, _ = solve_arrays(values, RobustSpec.chi2_pen(lam), pp)
    return -chi2_divergence(q, pp)
