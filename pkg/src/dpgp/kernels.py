"""Covariance functions.

Three families are provided:

* ``EQ`` - stationary exponentiated quadratic with per-dimension lengthscales,
  ``variance * exp(-0.5 * sum_d (x_d - x'_d)**2 / l_d**2)``.
* ``GIBBS`` - the Gibbs/Paciorek construction with a position-dependent
  lengthscale, usually a :class:`LengthscaleFunction` built from a kernel
  density estimate of the (public) training inputs.
* ``WEIGHTED_SUM`` - ``w(x) k_f(x, x') w(x') + (1 - w(x)) k_g(x, x') (1 - w(x'))``,
  a smoothly switched mixture of two GPs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

ArrayLike = Union[float, Sequence[float], np.ndarray]


class Family(str, enum.Enum):
    EQ = "EQ"
    GIBBS = "GIBBS"
    WEIGHTED_SUM = "WEIGHTED_SUM"


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"inputs must be 1-D or 2-D, got shape {X.shape}")
    return X


def silverman_bandwidth(X: np.ndarray) -> float:
    """Rule-of-thumb KDE bandwidth for an ``N x D`` sample."""
    X = _as_2d(X)
    n, dim = X.shape
    sd = X.std(axis=0, ddof=1) if n > 1 else np.ones(dim)
    sd = float(np.mean(sd))
    if not sd > 0:
        sd = 1.0
    return sd * (4.0 / ((dim + 2.0) * n)) ** (1.0 / (dim + 4.0))


@dataclass(frozen=True, eq=False)
class LengthscaleFunction:
    """Density-driven lengthscale ``l(x) = 1 / (1/m + rho(x)/n)``.

    ``rho`` is an unnormalised Gaussian KDE of the training inputs (a count
    density, so ``rho * l`` is roughly the number of points within a
    lengthscale). With ``neighbourhood_radius > 0`` the density used is the
    smallest KDE value found on a probe set covering the ball of that radius
    around ``x``, which lets dense regions lend long lengthscales to their
    sparse neighbours.

    Parameters
    ----------
    n : target number of points within half a lengthscale.
    m : upper bound on the lengthscale.
    training_inputs : ``N x D`` array.
    kde_bandwidth : defaults to :func:`silverman_bandwidth`.
    neighbourhood_radius : defaults to one bandwidth; ``0`` disables the
        neighbourhood minimum.
    """

    n: float
    m: float
    training_inputs: np.ndarray
    kde_bandwidth: Optional[float] = None
    neighbourhood_radius: Optional[float] = None

    def __post_init__(self):
        X = _as_2d(self.training_inputs)
        if X.shape[0] == 0:
            raise ValueError("lengthscale function needs at least one training input")
        if not (self.n > 0 and self.m > 0):
            raise ValueError("n and m must be positive")
        object.__setattr__(self, "training_inputs", X)
        h = silverman_bandwidth(X) if self.kde_bandwidth is None else float(self.kde_bandwidth)
        if not h > 0:
            raise ValueError("kde_bandwidth must be positive")
        object.__setattr__(self, "kde_bandwidth", h)
        r = h if self.neighbourhood_radius is None else float(self.neighbourhood_radius)
        if r < 0:
            raise ValueError("neighbourhood_radius must be nonnegative")
        object.__setattr__(self, "neighbourhood_radius", r)

    @property
    def dim(self) -> int:
        return self.training_inputs.shape[1]

    def density(self, X) -> np.ndarray:
        X = _as_2d(X)
        h = self.kde_bandwidth
        sq = cdist(X, self.training_inputs, "sqeuclidean")
        norm = (2 * np.pi * h * h) ** (-self.dim / 2.0)
        return norm * np.exp(-0.5 * sq / (h * h)).sum(axis=1)

    def _probe_offsets(self) -> np.ndarray:
        dim, r = self.dim, self.neighbourhood_radius
        offsets = [np.zeros(dim)]
        eye = np.eye(dim)
        for frac in (1 / 3, 2 / 3, 1.0):
            for d in range(dim):
                offsets.append(frac * r * eye[d])
                offsets.append(-frac * r * eye[d])
        if 1 < dim <= 3:
            corners = np.array(np.meshgrid(*[[-1.0, 1.0]] * dim)).reshape(dim, -1).T
            offsets.extend(corners * r / np.sqrt(dim))
        return np.array(offsets)

    def min_density(self, X) -> np.ndarray:
        X = _as_2d(X)
        if self.neighbourhood_radius == 0:
            return self.density(X)
        offs = self._probe_offsets()
        probes = (X[:, None, :] + offs[None, :, :]).reshape(-1, self.dim)
        return self.density(probes).reshape(X.shape[0], len(offs)).min(axis=1)

    def lengthscale_from_density(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        # 1 / (1 / m) can round above m
        return np.minimum(1.0 / (1.0 / self.m + rho / self.n), self.m)

    def __call__(self, X) -> np.ndarray:
        return self.lengthscale_from_density(self.min_density(X))


def lengthscale_at(x, fn: LengthscaleFunction) -> float:
    """Lengthscale at a single point ``x``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return float(fn(x)[0])


@dataclass(frozen=True, eq=False)
class KernelSpec:
    family: Family = Family.EQ
    variance: float = 1.0
    lengthscales: ArrayLike = 1.0
    lengthscale_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    components: Optional[tuple] = None
    weight_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.family is not Family.WEIGHTED_SUM and not self.variance > 0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if self.family is Family.EQ and not np.all(ls > 0):
            raise ValueError(f"lengthscales must be positive, got {ls}")
        object.__setattr__(self, "lengthscales", ls)
        if self.family is Family.GIBBS and self.lengthscale_fn is None:
            raise ValueError("GIBBS kernel needs a lengthscale_fn")
        if self.family is Family.WEIGHTED_SUM:
            if self.components is None or len(self.components) != 2 or self.weight_fn is None:
                raise ValueError("WEIGHTED_SUM kernel needs two components and a weight_fn")


def _check_lengthscales(spec: KernelSpec, dim: int) -> np.ndarray:
    ls = spec.lengthscales
    if ls.size == 1:
        return np.full(dim, ls[0])
    if ls.size != dim:
        raise ValueError(f"kernel has {ls.size} lengthscales but inputs have {dim} dimensions")
    return ls


def eq_cov(X1, X2, spec: KernelSpec) -> np.ndarray:
    X1, X2 = _as_2d(X1), _as_2d(X2)
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    ls = _check_lengthscales(spec, X1.shape[1])
    sq = cdist(X1 / ls, X2 / ls, "sqeuclidean")
    return spec.variance * np.exp(-0.5 * sq)


def _lengthscales_per_dim(fn, X: np.ndarray) -> np.ndarray:
    r = np.asarray(fn(X), dtype=float)
    if r.ndim == 1:
        r = np.repeat(r[:, None], X.shape[1], axis=1)
    if r.shape != X.shape:
        raise ValueError(f"lengthscale function returned shape {r.shape} for inputs {X.shape}")
    if not np.all(r > 0):
        raise ValueError("lengthscale function returned a nonpositive value")
    return r


def gibbs_cov(X1, X2, spec: KernelSpec) -> np.ndarray:
    X1, X2 = _as_2d(X1), _as_2d(X2)
    if X1.shape[1] != X2.shape[1]:
        raise ValueError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    r1 = _lengthscales_per_dim(spec.lengthscale_fn, X1)
    r2 = _lengthscales_per_dim(spec.lengthscale_fn, X2)
    out = np.full((X1.shape[0], X2.shape[0]), float(spec.variance))
    expo = np.zeros_like(out)
    for d in range(X1.shape[1]):
        a, b = r1[:, d][:, None], r2[:, d][None, :]
        s = a * a + b * b
        out *= np.sqrt(2 * a * b / s)
        expo += (X1[:, d][:, None] - X2[:, d][None, :]) ** 2 / s
    return out * np.exp(-expo)


def _weights(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    w = np.asarray(spec.weight_fn(X), dtype=float).reshape(-1)
    if np.any(w < 0) or np.any(w > 1):
        raise ValueError("weight function must map into [0, 1]")
    return w


def weighted_sum_cov(X1, X2, spec: KernelSpec) -> np.ndarray:
    X1, X2 = _as_2d(X1), _as_2d(X2)
    kf, kg = spec.components
    w1, w2 = _weights(spec, X1), _weights(spec, X2)
    return (np.outer(w1, w2) * covariance(X1, X2, kf)
            + np.outer(1 - w1, 1 - w2) * covariance(X1, X2, kg))


def covariance(X1, X2, spec: KernelSpec) -> np.ndarray:
    """Dispatch on ``spec.family``."""
    if spec.family is Family.EQ:
        return eq_cov(X1, X2, spec)
    if spec.family is Family.GIBBS:
        return gibbs_cov(X1, X2, spec)
    return weighted_sum_cov(X1, X2, spec)


def cov_diag(X, spec: KernelSpec) -> np.ndarray:
    X = _as_2d(X)
    if spec.family is Family.WEIGHTED_SUM:
        kf, kg = spec.components
        w = _weights(spec, X)
        return w * w * cov_diag(X, kf) + (1 - w) ** 2 * cov_diag(X, kg)
    return np.full(X.shape[0], float(spec.variance))


@dataclass(frozen=True)
class HyperConfig:
    """One point of a hyperparameter grid: EQ lengthscale(s), kernel and noise variance."""

    lengthscale: ArrayLike
    kernel_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = self.lengthscale
        if not np.isscalar(ls):
            ls = tuple(float(v) for v in np.atleast_1d(ls))
            object.__setattr__(self, "lengthscale", ls[0] if len(ls) == 1 else ls)
        if not np.all(np.asarray(self.lengthscale) > 0):
            raise ValueError("lengthscale must be positive")
        if not self.kernel_variance > 0:
            raise ValueError("kernel_variance must be positive")
        if not self.noise_variance >= 0:
            raise ValueError("noise_variance must be nonnegative")

    def kernel(self) -> KernelSpec:
        return KernelSpec(Family.EQ, self.kernel_variance, self.lengthscale)

    @property
    def lengthscale_scalar(self) -> float:
        """Geometric mean lengthscale, used when summarising grids."""
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        return float(ls[0]) if ls.size == 1 else float(np.exp(np.mean(np.log(ls))))
