"""Problem instances: sample oracles with per-sample losses and gradients.

Most instances here are finite-support with affine losses
``l(x; i) = c_i + <a_i, x>``, which covers the hard instances used to
probe estimator bias and variance. ``LogisticProblem`` wraps a feature
dataset with the regularized multi-class log loss.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from .core import LossBatch


class Problem:
    """Base class for sample oracles.

    Subclasses set ``dim``, ``radius`` (``None`` for unconstrained), the
    declared bounds ``bound_B``/``bound_G`` (``None`` when unknown) and
    implement ``sample`` and ``loss_grad``. Finite-support problems also set
    ``probs`` (one probability per atom); samples are then atom indices.
    """

    dim: int
    radius: Optional[float] = None
    bound_B: Optional[float] = None
    bound_G: Optional[float] = None
    probs: Optional[np.ndarray] = None

    @property
    def finite(self) -> bool:
        return self.probs is not None

    @property
    def n_atoms(self) -> int:
        if self.probs is None:
            raise ValueError("problem has infinite support")
        return self.probs.size

    def initial_point(self) -> np.ndarray:
        return np.zeros(self.dim)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def loss_grad(self, x: np.ndarray, samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def losses(self, x: np.ndarray, samples: np.ndarray) -> np.ndarray:
        return self.loss_grad(x, samples)[0]

    def batch(self, x: np.ndarray, samples: np.ndarray) -> LossBatch:
        values, grads = self.loss_grad(x, samples)
        return LossBatch(values, grads)

    def atoms(self) -> np.ndarray:
        """Every support point, in atom order (finite support only)."""
        return np.arange(self.n_atoms)

    def _draw_atoms(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self._uniform:
            return rng.integers(0, self.probs.size, size=n)
        idx = np.searchsorted(self._cdf, rng.random(n), side="right")
        return np.minimum(idx, self.probs.size - 1)

    def _set_probs(self, probs) -> None:
        probs = np.asarray(probs, dtype=float).reshape(-1)
        if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("atom probabilities must be nonnegative and sum to 1")
        keep = probs > 0
        if not keep.all():
            raise ValueError("atoms with zero probability are not allowed")
        self.probs = probs / probs.sum()
        self._cdf = np.cumsum(self.probs)
        self._uniform = bool(np.allclose(self.probs, self.probs[0], rtol=0, atol=1e-15))


class AffineAtoms(Problem):
    """Finite support with affine losses ``c_i + <a_i, x>``."""

    def __init__(self, offsets, slopes, probs=None, radius: Optional[float] = None,
                 bound_B: Optional[float] = None, bound_G: Optional[float] = None,
                 name: str = "affine"):
        self.offsets = np.asarray(offsets, dtype=float).reshape(-1)
        slopes = np.asarray(slopes, dtype=float)
        if slopes.ndim == 1:
            slopes = slopes.reshape(-1, 1)
        if slopes.shape[0] != self.offsets.size:
            raise ValueError("offsets and slopes disagree on the number of atoms")
        self.slopes = slopes
        self.dim = slopes.shape[1]
        if probs is None:
            probs = np.full(self.offsets.size, 1.0 / self.offsets.size)
        self._set_probs(probs)
        self.radius = radius
        self.bound_B = bound_B
        self.bound_G = bound_G
        self.name = name

    def sample(self, rng, n):
        return self._draw_atoms(rng, n)

    def loss_grad(self, x, samples):
        x = np.asarray(x, dtype=float).reshape(-1)
        samples = np.asarray(samples, dtype=int)
        grads = self.slopes[samples]
        return self.offsets[samples] + grads @ x, grads

    def losses(self, x, samples):
        x = np.asarray(x, dtype=float).reshape(-1)
        samples = np.asarray(samples, dtype=int)
        return self.offsets[samples] + self.slopes[samples] @ x


class GaussianLinear(Problem):
    """Infinite-support affine loss ``c + <a, x>`` with Gaussian slopes.

    ``a ~ N(mean, scale^2 I)`` and ``c = |a| R + 0.1`` keeps losses
    nonnegative on the ball of radius R.
    """

    def __init__(self, dim: int, radius: float = 1.0, scale: float = 0.3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.mean = rng.normal(size=dim) * scale / math.sqrt(dim)
        self.scale = scale
        self.dim = dim
        self.radius = radius

    def sample(self, rng, n):
        return self.mean + self.scale * rng.normal(size=(n, self.dim))

    def loss_grad(self, x, samples):
        a = np.asarray(samples, dtype=float)
        c = np.linalg.norm(a, axis=1) * self.radius + 0.1
        return c + a @ np.asarray(x, dtype=float), a


# --------------------------------------------------------------------------
# analytic hard instances


def bernoulli_linear(p0: float, B: float = 1.0, R: float = 1.0) -> AffineAtoms:
    """``P0 = Bernoulli(p0)`` with ``l(x; s) = B s x`` on ``[-R, R]``.

    At ``x = 1`` the loss is ``B s``; estimator studies fix ``x = 1``.
    """
    if not 0.0 < p0 < 1.0:
        raise ValueError("p0 must lie in (0, 1)")
    return AffineAtoms([0.0, 0.0], [[0.0], [B]], probs=[1.0 - p0, p0], radius=R,
                       bound_B=B * R, bound_G=B, name="bernoulli")


def single_atom(value: float = 0.5, slope=(1.0,), radius: Optional[float] = None) -> AffineAtoms:
    """Deterministic P0: every draw is the same atom."""
    return AffineAtoms([value], [list(slope)], radius=radius, name="single_atom",
                       bound_G=float(np.linalg.norm(slope)))


def lecam_mu(alpha: float, delta: float) -> float:
    r = delta / (2.0 * alpha)
    return r / (1.0 - r)


def cvar_lecam_pair(G: float, R: float, alpha: float, delta: float) -> Tuple[AffineAtoms, AffineAtoms]:
    """The two 1-d distributions that are hard to tell apart for CVaR.

    ``S_v`` equals ``G mu`` with probability ``alpha + delta v`` and ``-G``
    otherwise, ``l(x; s) = x s`` on ``[-R, R]``. Returns ``(P_{+1}, P_{-1})``.
    """
    if not 0.0 < alpha <= 0.5:
        raise ValueError("the construction needs alpha in (0, 1/2]")
    if delta < 0 or delta > min(alpha, 1.0 - 2.0 * alpha) + 1e-15:
        raise ValueError("delta must satisfy 0 <= delta <= min(alpha, 1 - 2 alpha)")
    mu = lecam_mu(alpha, delta)
    out = []
    for v in (1, -1):
        hi = alpha + delta * v
        if hi <= 0:
            raise ValueError("degenerate probability for the high atom")
        out.append(AffineAtoms([0.0, 0.0], [[G * mu], [-G]], probs=[hi, 1.0 - hi],
                               radius=R, bound_G=G * max(mu, 1.0), name=f"lecam{v:+d}"))
    return out[0], out[1]


def lecam_cvar_value(x: float, G: float, alpha: float, delta: float, v: int = 1) -> float:
    """Closed-form CVaR objective of the Le Cam instances."""
    mu = lecam_mu(alpha, delta)
    if x <= 0:
        return -G * x
    return G * x * mu if v == 1 else -G * x * mu


def three_point_p2(n: int) -> float:
    """Probability of the rare atom, chosen so that ``(1 - p2)^n = 1/2``."""
    return 1.0 - 2.0 ** (-1.0 / n)


def three_point_hard(rho: float, G: float, n: int) -> AffineAtoms:
    """Three-atom instance on which the constrained-chi2 gradient is erratic.

    Atoms ``{0, 1, 2}`` have losses ``{0, 1/(30 n), 1}`` at ``x = 0`` and
    gradients ``{-G, G, -G}``.
    """
    if n <= 4:
        raise ValueError("three_point_hard needs n > 4")
    if rho < 1:
        raise ValueError("three_point_hard needs rho >= 1")
    p2 = three_point_p2(n)
    p1 = 1.0 / (1.0 + 2.0 * rho)
    p0 = 1.0 - p1 - p2
    return AffineAtoms([0.0, 1.0 / (30.0 * n), 1.0], [[-G], [G], [-G]],
                       probs=[p0, p1, p2], radius=1.0, bound_B=1.0, bound_G=G,
                       name="three_point")


def finite_linear(n_atoms: int = 200, dim: int = 5, radius: float = 1.0,
                  seed: int = 0, G: float = 0.4) -> AffineAtoms:
    """Random uniform finite-support affine losses with values in ``[0, 1]``.

    Slopes are Gaussian with a common drift, rescaled to norm at most ``G``;
    offsets ``R |a_i| + U(0, 1 - 2 G R)`` keep every loss inside ``[0, 1]``
    on the ball of radius ``R``.
    """
    if 2 * G * radius >= 1.0:
        raise ValueError("need 2 G R < 1 to keep losses in [0, 1]")
    rng = np.random.default_rng(seed)
    drift = rng.normal(size=dim)
    drift /= np.linalg.norm(drift)
    a = rng.normal(size=(n_atoms, dim)) + 0.5 * drift
    a *= G / np.linalg.norm(a, axis=1).max()
    c = radius * np.linalg.norm(a, axis=1) + rng.uniform(0.0, 1.0 - 2 * G * radius, size=n_atoms)
    return AffineAtoms(c, a, radius=radius, bound_B=1.0, bound_G=G, name="finite_linear")


# --------------------------------------------------------------------------
# datasets and the regularized multi-class log loss


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.size:
            raise ValueError("features must be an N x d matrix matching the labels")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.groups is not None:
            groups = np.asarray(self.groups, dtype=int).reshape(-1)
            if groups.size != labels.size:
                raise ValueError("group tags must have one entry per row")
            object.__setattr__(self, "groups", groups)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return self.labels.size


class CsvFormatError(ValueError):
    pass


def load_dataset_csv(path) -> Dataset:
    """Read ``label[,group],f0,f1,...`` rows with a header line."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        if "label" not in header:
            raise CsvFormatError(f"{path}:1: missing required column 'label'")
        label_col = header.index("label")
        group_col = header.index("group") if "group" in header else None
        feat_cols = [i for i, h in enumerate(header) if i not in (label_col, group_col)]
        if not feat_cols:
            raise CsvFormatError(f"{path}:1: no feature columns")
        feats, labels, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                labels.append(int(row[label_col]))
                if group_col is not None:
                    groups.append(int(row[group_col]))
                feats.append([float(row[i]) for i in feat_cols])
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise CsvFormatError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels),
                   np.array(groups) if group_col is not None else None)


def write_dataset_csv(dataset: Dataset, path) -> None:
    path = Path(path)
    nfeat = dataset.features.shape[1]
    header = ["label"] + (["group"] if dataset.groups is not None else [])
    header += [f"f{j}" for j in range(nfeat)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [int(dataset.labels[i])]
            if dataset.groups is not None:
                row.append(int(dataset.groups[i]))
            row += [repr(float(v)) for v in dataset.features[i]]
            w.writerow(row)


def synthetic_subgroup_dataset(n: int = 400, n_features: int = 4, n_classes: int = 3,
                               rare_fraction: float = 0.05, seed: int = 0) -> Dataset:
    """Gaussian class clusters plus a rare subgroup with shifted class means.

    A stand-in for featurized data with a minority subpopulation; group 1 is
    the rare group.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(scale=2.0, size=(n_classes, n_features))
    shifted = means + rng.normal(scale=2.0, size=(n_classes, n_features))
    labels = rng.integers(0, n_classes, size=n)
    groups = (rng.random(n) < rare_fraction).astype(int)
    centers = np.where(groups[:, None] == 1, shifted[labels], means[labels])
    feats = centers + rng.normal(size=(n, n_features))
    return Dataset(feats, labels, groups)


class LogisticProblem(Problem):
    """Regularized multi-class log loss over a dataset (uniform over rows).

    The parameter is the flattened ``C x (d + 1)`` matrix whose last column
    holds the per-class biases; biases are not regularized.
    """

    def __init__(self, dataset: Dataset, mu: float = 0.0, radius: Optional[float] = None,
                 n_classes: Optional[int] = None, bound_B: Optional[float] = None):
        if mu < 0:
            raise ValueError("mu must be nonnegative")
        self.data = dataset
        self.mu = float(mu)
        self.n_classes = n_classes or dataset.n_classes
        if dataset.labels.max() >= self.n_classes:
            raise ValueError("labels exceed the number of classes")
        self.n_features = dataset.features.shape[1]
        self.dim = self.n_classes * (self.n_features + 1)
        self._aug = np.hstack([dataset.features, np.ones((len(dataset), 1))])
        self._set_probs(np.full(len(dataset), 1.0 / len(dataset)))
        self.radius = radius
        zmax = float(np.sqrt((self._aug ** 2).sum(axis=1).max()))
        if radius is not None:
            self.bound_G = math.sqrt(2.0) * zmax + self.mu * radius
            self.bound_B = bound_B if bound_B is not None else (
                math.log(self.n_classes) + 2.0 * radius * zmax + 0.5 * self.mu * radius ** 2)
        else:
            self.bound_B = bound_B

    def sample(self, rng, n):
        return self._draw_atoms(rng, n)

    def _split(self, x):
        return np.asarray(x, dtype=float).reshape(self.n_classes, self.n_features + 1)

    def loss_grad(self, x, samples):
        theta = self._split(x)
        samples = np.asarray(samples, dtype=int)
        z = self._aug[samples]
        y = self.data.labels[samples]
        scores = z @ theta.T
        rows = np.arange(samples.size)
        reg = 0.5 * self.mu * float(np.sum(theta[:, :-1] ** 2))
        values = logsumexp(scores, axis=1) - scores[rows, y] + reg
        coef = softmax(scores, axis=1)
        coef[rows, y] -= 1.0
        grads = coef[:, :, None] * z[:, None, :]
        if self.mu:
            grads[:, :, :-1] += self.mu * theta[None, :, :-1]
        return values, grads.reshape(samples.size, -1)


def multiclass_logistic(dataset: Dataset, mu: float, radius: Optional[float] = None) -> LogisticProblem:
    return LogisticProblem(dataset, mu, radius=radius)
