"""Domain types shared across the package.

Everything here is immutable after construction. Arrays handed to the
constructors are copied and marked read-only so instances can be shared
between threads without defensive copies.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SIMPLEX_TOL = 1e-9
RENORMALIZE_TOL = 1e-7


class Kind(str, enum.Enum):
    CVAR = "cvar"
    KL_CVAR = "kl_cvar"
    CHI2_PEN = "chi2_pen"
    CHI2_CON = "chi2_con"


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RobustSpec:
    """Which uncertainty set / penalty defines the robust objective.

    Use the ``cvar``/``kl_cvar``/``chi2_pen``/``chi2_con`` constructors; only
    the parameters relevant to ``kind`` are stored, the rest stay ``None``.
    """

    kind: Kind
    alpha: Optional[float] = None
    lam: Optional[float] = None
    rho: Optional[float] = None

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        needs = {
            Kind.CVAR: {"alpha"},
            Kind.KL_CVAR: {"alpha", "lam"},
            Kind.CHI2_PEN: {"lam"},
            Kind.CHI2_CON: {"rho"},
        }[kind]
        for name in ("alpha", "lam", "rho"):
            val = getattr(self, name)
            if name in needs and val is None:
                raise ValueError(f"{kind.value} objective requires {name}")
            if name not in needs and val is not None:
                raise ValueError(f"{name} is not a parameter of the {kind.value} objective")
        if self.alpha is not None and not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.lam is not None and not (self.lam > 0.0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be positive and finite, got {self.lam}")
        if self.rho is not None and not (self.rho >= 0.0 and math.isfinite(self.rho)):
            raise ValueError(f"rho must be nonnegative and finite, got {self.rho}")

    @classmethod
    def cvar(cls, alpha: float) -> "RobustSpec":
        return cls(Kind.CVAR, alpha=float(alpha))

    @classmethod
    def kl_cvar(cls, alpha: float, lam: float) -> "RobustSpec":
        return cls(Kind.KL_CVAR, alpha=float(alpha), lam=float(lam))

    @classmethod
    def chi2_pen(cls, lam: float) -> "RobustSpec":
        return cls(Kind.CHI2_PEN, lam=float(lam))

    @classmethod
    def chi2_con(cls, rho: float) -> "RobustSpec":
        return cls(Kind.CHI2_CON, rho=float(rho))

    @classmethod
    def from_dict(cls, d: dict) -> "RobustSpec":
        kind = Kind(d["kind"])
        return cls(kind, alpha=d.get("alpha"), lam=d.get("lambda"), rho=d.get("rho"))

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value}
        for key, val in (("alpha", self.alpha), ("lambda", self.lam), ("rho", self.rho)):
            if val is not None:
                out[key] = val
        return out


@dataclass(frozen=True)
class LossBatch:
    """Loss values (and optionally per-sample gradients) for one sample.

    ``bound_B`` and ``bound_G`` are declared bounds; ``None`` means unknown
    and disables the corresponding range check.
    """

    values: np.ndarray
    grads: Optional[np.ndarray] = None
    bound_B: Optional[float] = None
    bound_G: Optional[float] = None

    def __post_init__(self):
        values = _frozen(self.values).reshape(-1)
        if values.size == 0:
            raise ValueError("loss batch is empty")
        if not np.all(np.isfinite(values)):
            raise ValueError("loss values must be finite")
        if self.bound_B is not None:
            if self.bound_B < 0:
                raise ValueError("bound_B must be nonnegative")
            if values.min() < 0 or values.max() > self.bound_B:
                raise ValueError(f"loss values outside [0, {self.bound_B}]")
        object.__setattr__(self, "values", values)
        if self.grads is not None:
            grads = _frozen(self.grads)
            if grads.ndim == 1:
                grads = grads.reshape(-1, 1)
            if grads.ndim != 2 or grads.shape[0] != values.size:
                raise ValueError(
                    f"grads must have shape (n, d) with n={values.size}, got {grads.shape}"
                )
            object.__setattr__(self, "grads", grads)

    @property
    def n(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class Weights:
    """A point of the probability simplex.

    Inputs whose sum is within ``1e-7`` of one are renormalized; anything
    further off is rejected.
    """

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        if q.size == 0:
            raise ValueError("weights are empty")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("weights must be finite and nonnegative")
        total = q.sum()
        if abs(total - 1.0) > RENORMALIZE_TOL:
            raise ValueError(f"weights sum to {total!r}, not 1")
        if abs(total - 1.0) > SIMPLEX_TOL:
            q = q / total
        object.__setattr__(self, "q", _frozen(q))

    @property
    def n(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class InnerSolution:
    weights: Weights
    eta: float
    value: float


@dataclass(frozen=True)
class EstimatorOutput:
    """Result of one stochastic estimator call.

    ``lambda_deriv`` is only set by estimators that also estimate the
    derivative of the penalized objective in its penalty parameter.
    """

    grad: np.ndarray
    value_estimate: float
    grad_evals: int
    lambda_deriv: Optional[float] = field(default=None)

    def __post_init__(self):
        grad = _frozen(self.grad).reshape(-1)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("estimator produced a non-finite gradient")
        if self.grad_evals < 1:
            raise ValueError("grad_evals must be at least 1")
        object.__setattr__(self, "grad", grad)


def _as_q(q) -> np.ndarray:
    if isinstance(q, Weights):
        return q.q
    arr = np.asarray(q, dtype=float).reshape(-1)
    if arr.size == 0:
        raise ValueError("weights are empty")
    return arr


def _base(p, n: int) -> np.ndarray:
    if p is None:
        return np.full(n, 1.0 / n)
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size != n:
        raise ValueError("reference distribution has the wrong length")
    return p


def chi2_divergence(q, p=None) -> float:
    """D(q || p) = 1/2 sum_i p_i (q_i/p_i - 1)^2, with p uniform by default."""
    q = _as_q(q)
    p = _base(p, q.size)
    if np.any(p <= 0):
        raise ValueError("reference distribution must be strictly positive")
    return float(0.5 * np.sum(p * (q / p - 1.0) ** 2))


def kl_divergence(q, p=None) -> float:
    """KL(q || p) written as sum_i p_i (t log t - t + 1) with t = q_i/p_i."""
    q = _as_q(q)
    p = _base(p, q.size)
    if np.any(p <= 0):
        raise ValueError("reference distribution must be strictly positive")
    t = q / p
    tlogt = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    return float(np.sum(p * (tlogt - t + 1.0)))
