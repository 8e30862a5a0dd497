"""Differentially private GP regression.

The training inputs are public and the outputs private.  Both pipelines
predict with a linear smoother ``prior_mean + C (y - prior_mean)``, cloak it
with :func:`dpgp.cloaking.cloak` and release the predictive variance without
noise because it never touches ``y``.

``prior_mean`` must be a public constant (for instance a plausible
population average); estimating it from ``y`` would leak.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._linalg import cholesky, tri_solve
from .cloaking import CloakingResult, PrivacySpec, cloak, cloaking_matrix, dp_noise_sample
from .kernels import Family, HyperConfig, KernelSpec, _as_2d, cov_diag, covariance
from .sparse import fitc_cloaking_matrix, fitc_predict_var, kmeans_place

MODES = ("standard", "sparse", "gibbs")


@dataclass
class RegressionTask:
    """Inputs of one regression release.

    ``mode`` is ``"standard"``, ``"sparse"`` (FITC through ``m_count``
    k-means inducing inputs, or through ``Z`` when given) or ``"gibbs"``
    (dense cloaking with the variable-lengthscale kernel built from
    ``lengthscale_fn``).
    """

    X: np.ndarray
    y: np.ndarray
    X_star: np.ndarray
    theta: HyperConfig
    privacy: PrivacySpec
    mode: str = "standard"
    m_count: Optional[int] = None
    Z: Optional[np.ndarray] = None
    lengthscale_fn: Optional[object] = None
    prior_mean: float = 0.0
    cloak_iterations: int = 200

    def __post_init__(self):
        self.X = _as_2d(self.X)
        self.X_star = _as_2d(self.X_star)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] < 1 or self.X_star.shape[0] < 1:
            raise ValueError("need at least one training and one test input")
        if self.y.shape[0] != self.X.shape[0]:
            raise ValueError(f"{self.X.shape[0]} inputs but {self.y.shape[0]} outputs")
        if self.X.shape[1] != self.X_star.shape[1]:
            raise ValueError("training and test inputs differ in dimension")
        for name in ("X", "y", "X_star"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "sparse" and self.Z is None:
            if self.m_count is None or not 1 <= self.m_count <= self.X.shape[0]:
                raise ValueError(f"sparse mode needs 1 <= m_count <= N, got {self.m_count}")
        if self.mode == "gibbs" and self.lengthscale_fn is None:
            raise ValueError("gibbs mode needs a lengthscale_fn")

    def kernel(self) -> KernelSpec:
        if self.mode == "gibbs":
            return KernelSpec(Family.GIBBS, self.theta.kernel_variance,
                              lengthscale_fn=self.lengthscale_fn)
        return self.theta.kernel()


@dataclass
class DPPrediction:
    dp_mean: np.ndarray
    clean_mean: np.ndarray
    gp_variance: np.ndarray
    dp_noise_std: np.ndarray
    cloaking: Optional[CloakingResult]
    Z: Optional[np.ndarray] = None

    @property
    def noise(self) -> np.ndarray:
        return self.dp_mean - self.clean_mean


@dataclass
class LinearFit:
    """Everything about a release except the noise draw."""

    C: np.ndarray
    clean_mean: np.ndarray
    gp_variance: np.ndarray
    cloaking: Optional[CloakingResult]
    Z: Optional[np.ndarray] = None

    def release(self, privacy: PrivacySpec, rng: np.random.Generator) -> DPPrediction:
        if self.cloaking is None:
            noise = np.zeros_like(self.clean_mean)
            std = np.zeros_like(self.clean_mean)
        else:
            noise = dp_noise_sample(self.cloaking, privacy, rng)
            std = (self.cloaking.noise_std * privacy.sensitivity / self.cloaking.sensitivity)
        return DPPrediction(self.clean_mean + noise, self.clean_mean, self.gp_variance,
                            std, self.cloaking, self.Z)


def _dense_parts(task: RegressionTask):
    kern = task.kernel()
    K = covariance(task.X, task.X, kern)
    K[np.diag_indices_from(K)] += task.theta.noise_variance
    K_sf = covariance(task.X_star, task.X, kern)
    C = cloaking_matrix(K_sf, K)
    L = cholesky(K, what="training covariance")
    V = tri_solve(L, K_sf.T)
    var = np.maximum(cov_diag(task.X_star, kern) - np.einsum("ij,ij->j", V, V), 0.0)
    return C, var


def _inducing(task: RegressionTask, rng: np.random.Generator) -> np.ndarray:
    if task.Z is not None:
        return _as_2d(task.Z)
    return kmeans_place(task.X, task.m_count, rng).Z


def fit_linear(task: RegressionTask, rng: Optional[np.random.Generator] = None,
               **cloak_kwargs) -> LinearFit:
    """Build ``C``, the clean mean and the variance, and cloak ``C``.

    Cloaking is skipped when ``epsilon`` is infinite.  ``rng`` is only used
    to place inducing inputs.
    """
    Z = None
    if task.mode == "sparse":
        Z = _inducing(task, rng if rng is not None else np.random.default_rng(0))
        C, _ = fitc_cloaking_matrix(task.X, task.X_star, Z, task.theta)
        var = fitc_predict_var(task.X_star, Z, task.theta, X=task.X, include_noise=False)
    else:
        C, var = _dense_parts(task)
    clean = task.prior_mean + C @ (task.y - task.prior_mean)
    result = None
    if not math.isinf(task.privacy.epsilon):
        result = cloak(C, task.privacy, iterations=task.cloak_iterations, **cloak_kwargs)
    return LinearFit(C, clean, var, result, Z)


def dp_gp_regress(task: RegressionTask, rng: np.random.Generator, **cloak_kwargs) -> DPPrediction:
    """Dense cloaking, with the EQ kernel or (``mode="gibbs"``) the Gibbs kernel."""
    if task.mode == "sparse":
        raise ValueError("dp_gp_regress handles standard and gibbs modes; use dp_sparse_regress")
    return fit_linear(task, **cloak_kwargs).release(task.privacy, rng)


def dp_sparse_regress(task: RegressionTask, rng: np.random.Generator, **cloak_kwargs) -> DPPrediction:
    """FITC cloaking through inducing inputs placed by k-means on ``task.X``."""
    if task.mode != "sparse":
        raise ValueError("dp_sparse_regress needs mode='sparse'")
    return fit_linear(task, rng, **cloak_kwargs).release(task.privacy, rng)


def regress(task: RegressionTask, rng: np.random.Generator, **cloak_kwargs) -> DPPrediction:
    if task.mode == "sparse":
        return dp_sparse_regress(task, rng, **cloak_kwargs)
    return dp_gp_regress(task, rng, **cloak_kwargs)


@dataclass
class CVResult:
    mean: float
    std: float
    fold_rmse: np.ndarray = field(repr=False)


def fold_indices(n: int, folds: int, rng: np.random.Generator) -> list:
    """Seeded shuffle split into ``folds`` nearly equal parts."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if folds > n:
        raise ValueError(f"cannot split {n} points into {folds} folds")
    return np.array_split(rng.permutation(n), folds)


def rmse_cv(task: RegressionTask, folds: int = 14, noise_draws: int = 25,
            rng: Optional[np.random.Generator] = None, **cloak_kwargs) -> CVResult:
    """Cross-validated RMSE of the DP mean.

    ``task.X_star`` is ignored.  Each fold is fitted and cloaked once, then
    ``noise_draws`` independent noise vectors are added; the fold's RMSE
    pools the squared errors over draws and held-out points.  Returns the
    mean and standard deviation over folds.
    """
    rng = rng if rng is not None else np.random.default_rng()
    n = task.X.shape[0]
    parts = fold_indices(n, folds, rng)
    draws = max(int(noise_draws), 1)
    out = np.empty(folds)
    for k, test in enumerate(parts):
        train = np.setdiff1d(np.arange(n), test)
        if train.size < 1:
            raise ValueError(f"fold {k} leaves no training points")
        sub = replace(task, X=task.X[train], y=task.y[train], X_star=task.X[test])
        fit = fit_linear(sub, rng, **cloak_kwargs)
        sq = 0.0
        for _ in range(draws):
            pred = fit.release(task.privacy, rng).dp_mean
            sq += float(np.sum((pred - task.y[test]) ** 2))
        out[k] = math.sqrt(sq / (draws * test.size))
    return CVResult(float(out.mean()), float(out.std()), out)
