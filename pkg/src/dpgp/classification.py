"""Differentially private binary GP classification via the Laplace approximation.

One Newton step from ``f = 0`` toward the posterior mode,

    f_new = 2 C (W f + 1/2 - pi(f)) + C y,    C = 1/2 (K^-1 + W)^-1,

is linear in the private labels ``y`` (coded -1/+1), so ``C y`` is released
through the cloaking mechanism with sensitivity ``d = 2`` (one flipped
label).  The remaining terms depend on ``f`` only.  The low-rank variant
replaces ``K`` by ``K_NM K_MM^-1 K_MN`` from k-means inducing inputs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from ._linalg import JITTER, chol_solve, cholesky, tri_solve
from .cloaking import CloakingResult, PrivacySpec, cloak, dp_noise_sample
from .kernels import HyperConfig, KernelSpec, _as_2d, cov_diag, covariance
from .sparse import kmeans_place, sor_features

class BudgetSplitWarning(UserWarning):
    pass


@dataclass
class LaplaceState:
    f_hat: np.ndarray
    pi: np.ndarray
    W_diag: np.ndarray

    @classmethod
    def at(cls, f) -> "LaplaceState":
        f = np.asarray(f, dtype=float)
        pi = expit(f)
        return cls(f, pi, pi * (1.0 - pi))


@dataclass
class ClassifyTask:
    """Inputs of a DP classification fit.

    ``y`` may be coded -1/+1.  ``m_count`` (or an explicit ``Z``) switches to
    the low-rank kernel.  ``theta.noise_variance`` is not used: the latent
    function is noise free.
    """

    X: np.ndarray
    y: np.ndarray
    theta: HyperConfig
    privacy: PrivacySpec
    X_star: Optional[np.ndarray] = None
    m_count: Optional[int] = None
    Z: Optional[np.ndarray] = None
    newton_iterations: int = 1
    cloak_iterations: int = 200

    def __post_init__(self):
        self.X = _as_2d(self.X)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.y.shape[0] != self.X.shape[0]:
            raise ValueError(f"{self.X.shape[0]} inputs but {self.y.shape[0]} labels")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if self.X_star is not None:
            self.X_star = _as_2d(self.X_star)
        if self.newton_iterations < 1:
            raise ValueError("newton_iterations must be at least 1")
        if self.Z is None and self.m_count is not None and not 1 <= self.m_count <= self.X.shape[0]:
            raise ValueError(f"m_count must lie in [1, N], got {self.m_count}")

    @property
    def sparse(self) -> bool:
        return self.Z is not None or self.m_count is not None


def laplace_cloaking_matrix(K, W_diag) -> np.ndarray:
    """``C = 1/2 (K^-1 + W)^-1`` as ``1/2 (K - R^T R)``.

    ``R = L_B^-1 W^1/2 K`` with ``L_B`` the Cholesky factor of
    ``B = I + W^1/2 K W^1/2``, which is well conditioned and never needs
    ``K^-1``; zero entries of ``W`` are allowed.
    """
    K = np.asarray(K, dtype=float)
    W_diag = np.asarray(W_diag, dtype=float)
    if np.any(W_diag < 0):
        raise ValueError("W must be nonnegative")
    sw = np.sqrt(W_diag)
    B = np.eye(K.shape[0]) + sw[:, None] * K * sw[None, :]
    LB = cholesky(B, what="Laplace matrix B")
    R = tri_solve(LB, sw[:, None] * K)
    C = 0.5 * (K - R.T @ R)
    return 0.5 * (C + C.T)


def _train_kernel(task: ClassifyTask, rng: Optional[np.random.Generator],
                  kernel: Optional[KernelSpec] = None):
    """Return ``(K, Z)``; ``K`` is dense or low-rank plus jitter."""
    kern = kernel or task.theta.kernel()
    if not task.sparse:
        K = covariance(task.X, task.X, kern)
        return K, None
    Z = task.Z if task.Z is not None else kmeans_place(
        task.X, task.m_count, rng if rng is not None else np.random.default_rng(0)).Z
    Phi = sor_features(task.X, Z, task.theta, kern)
    K = Phi @ Phi.T
    K = 0.5 * (K + K.T)
    K[np.diag_indices_from(K)] += JITTER * np.mean(np.diag(K))
    return K, Z


@dataclass
class LaplaceFit:
    """Result of :func:`fit_laplace`; ``clean_f`` is the noise-free iterate."""

    state: LaplaceState
    cloaking: Optional[CloakingResult]
    K: np.ndarray
    Z: Optional[np.ndarray] = None
    clean_f: Optional[np.ndarray] = None
    iterations: int = 1


def laplace_update(K, state: LaplaceState, y, C: Optional[np.ndarray] = None):
    """Return ``(deterministic part, C y, C)`` of one Newton step from ``state``."""
    if C is None:
        C = laplace_cloaking_matrix(K, state.W_diag)
    det = 2.0 * C @ (state.W_diag * state.f_hat + 0.5 - state.pi)
    return det, C @ y, C


def fit_laplace(task: ClassifyTask, rng: np.random.Generator,
                kernel: Optional[KernelSpec] = None, **cloak_kwargs) -> LaplaceFit:
    """Privatised Laplace fit; see :func:`dp_laplace_fit`."""
    iters = task.newton_iterations
    privacy = task.privacy
    if iters > 1:
        warnings.warn(
            f"splitting epsilon={privacy.epsilon:g}, delta={privacy.delta:g} evenly over "
            f"{iters} Newton iterations; the extra noise per step usually costs more "
            "accuracy than the additional iterations recover", BudgetSplitWarning, stacklevel=3)
        privacy = privacy.split(iters)
    K, Z = _train_kernel(task, rng, kernel)
    state = LaplaceState.at(np.zeros(task.X.shape[0]))
    clean_state = state
    result = None
    for _ in range(iters):
        det, Cy, C = laplace_update(K, state, task.y)
        clean_det, clean_Cy, _ = laplace_update(K, clean_state, task.y)
        clean_state = LaplaceState.at(clean_det + clean_Cy)
        if math.isinf(privacy.epsilon):
            noise = 0.0
        else:
            result = cloak(C, privacy, iterations=task.cloak_iterations, **cloak_kwargs)
            noise = dp_noise_sample(result, privacy, rng)
        state = LaplaceState.at(det + Cy + noise)
    return LaplaceFit(state, result, K, Z, clean_state.f_hat, iters)


def redraw(fit: LaplaceFit, privacy: PrivacySpec, rng: np.random.Generator) -> LaplaceState:
    """A fresh private state from a single-iteration fit, reusing its optimised ``M``."""
    if fit.iterations != 1:
        raise ValueError("redraw only applies to single-iteration fits")
    if fit.cloaking is None or math.isinf(privacy.epsilon):
        return LaplaceState.at(fit.clean_f)
    return LaplaceState.at(fit.clean_f + dp_noise_sample(fit.cloaking, privacy, rng))


def dp_laplace_fit(task: ClassifyTask, rng: np.random.Generator, **cloak_kwargs):
    """Return ``(state, cloaking)`` after ``task.newton_iterations`` private steps.

    Starts at ``f = 0`` (``pi = 1/2``, ``W = 1/4``).  Noise is added only to
    the ``C y`` term, calibrated with ``task.privacy.sensitivity`` (2 for a
    label flip).  With more than one iteration the budget is split evenly
    and a :class:`BudgetSplitWarning` is emitted.  ``cloaking`` is ``None``
    when epsilon is infinite.
    """
    fit = fit_laplace(task, rng, **cloak_kwargs)
    return fit.state, fit.cloaking


def predict_latent(X_star, X, state: LaplaceState, theta: HyperConfig,
                   Z=None, kernel: Optional[KernelSpec] = None):
    """Latent mean ``k_*^T K^-1 f_hat`` and variance ``k_** - k_*^T (K + W^-1)^-1 k_*``.

    The mean goes through ``K^-1 f_hat`` rather than the label-dependent
    gradient so prediction spends no extra privacy.  With ``Z`` the
    low-rank kernel is used and the variance takes the DTC form.
    """
    kern = kernel or theta.kernel()
    X, X_star = _as_2d(X), _as_2d(X_star)
    kss = cov_diag(X_star, kern)
    sw = np.sqrt(state.W_diag)
    if Z is None:
        K = covariance(X, X, kern)
        Ks = covariance(X, X_star, kern)
        L = cholesky(K, jitter=JITTER, what="training covariance")
        mean = Ks.T @ chol_solve(L, state.f_hat)
        LB = cholesky(np.eye(K.shape[0]) + sw[:, None] * K * sw[None, :], what="Laplace matrix B")
        V = tri_solve(LB, sw[:, None] * Ks)
        var = kss - np.einsum("ij,ij->j", V, V)
    else:
        Phi = sor_features(X, Z, theta, kern)
        Phi_s = sor_features(X_star, Z, theta, kern)
        m = Phi.shape[1]
        G = Phi.T @ Phi
        tau = JITTER * np.mean(np.einsum("ij,ij->i", Phi, Phi))
        Lg = cholesky(G + tau * np.eye(m), what="low-rank Gram matrix")
        mean = Phi_s @ chol_solve(Lg, Phi.T @ state.f_hat)
        A = np.eye(m) + (Phi.T * state.W_diag) @ Phi
        La = cholesky(A, what="low-rank Laplace matrix")
        U = tri_solve(La, Phi_s.T)
        var = kss - np.einsum("ij,ij->i", Phi_s, Phi_s) + np.einsum("ij,ij->j", U, U)
    return mean, np.maximum(var, 0.0)


def predict_class_prob(mean) -> np.ndarray:
    """Logistic squash of the latent mean (noise is not integrated out)."""
    return expit(np.asarray(mean, dtype=float))


def predict_labels(mean) -> np.ndarray:
    return np.where(np.asarray(mean) >= 0, 1.0, -1.0)


def accuracy(mean, labels) -> float:
    return float(np.mean(predict_labels(mean) == np.asarray(labels)))


@dataclass
class ClassifyResult:
    state: LaplaceState
    cloaking: Optional[CloakingResult]
    latent_mean: np.ndarray
    latent_var: np.ndarray
    class_prob: np.ndarray
    Z: Optional[np.ndarray] = None


def classify(task: ClassifyTask, rng: np.random.Generator, **cloak_kwargs) -> ClassifyResult:
    """Fit and predict at ``task.X_star``, dense or low-rank."""
    if task.X_star is None:
        raise ValueError("classify needs X_star")
    fit = fit_laplace(task, rng, **cloak_kwargs)
    mean, var = predict_latent(task.X_star, task.X, fit.state, task.theta, Z=fit.Z)
    return ClassifyResult(fit.state, fit.cloaking, mean, var, predict_class_prob(mean), fit.Z)


def dp_sparse_classify(task: ClassifyTask, rng: np.random.Generator, **cloak_kwargs) -> ClassifyResult:
    """Low-rank pipeline: k-means inducing inputs, SoR kernel, one private step."""
    if not task.sparse:
        raise ValueError("dp_sparse_classify needs m_count or Z")
    return classify(task, rng, **cloak_kwargs)
