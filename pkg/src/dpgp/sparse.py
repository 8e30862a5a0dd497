"""Inducing inputs and sparse approximations.

Inducing inputs are placed with k-means on the public training inputs, so
their placement costs no privacy.  Regression goes through FITC, whose
predictive mean is linear in ``y`` and therefore has its own cloaking matrix.
Classification substitutes the low-rank SoR/DTC kernel
``K_NM K_MM^-1 K_MN`` into the Laplace update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from ._linalg import NumericalError, chol_solve, cholesky, tri_solve
from .kernels import HyperConfig, KernelSpec, _as_2d, cov_diag, covariance

# eigenvalues of K_MM below this fraction of the largest are dropped
EIG_RTOL = 1e-15


@dataclass
class InducingSet:
    Z: np.ndarray
    labels: Optional[np.ndarray] = None
    objective_history: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.Z.shape[0]


@dataclass
class FitcParts:
    Q_MM: np.ndarray
    Lambda: np.ndarray
    sigma2: float


def _farthest_first(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(X.shape[0]))]
    dmin = cdist(X, X[idx], "sqeuclidean")[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(dmin))
        idx.append(nxt)
        dmin = np.minimum(dmin, cdist(X, X[nxt:nxt + 1], "sqeuclidean")[:, 0])
    return X[idx].copy()


def kmeans_place(X, m_count: int, rng: np.random.Generator, max_iter: int = 100) -> InducingSet:
    """Lloyd's algorithm from a farthest-first seeding.

    A cluster that loses all its points is re-seeded at the point farthest
    from its current centre.  ``objective_history`` records the
    within-cluster sum of squares after every assignment step.
    """
    X = _as_2d(X)
    n = X.shape[0]
    if not 1 <= m_count <= n:
        raise ValueError(f"inducing count must be between 1 and N={n}, got {m_count}")
    centres = _farthest_first(X, m_count, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = cdist(X, centres, "sqeuclidean")
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for j in range(m_count):
            members = labels == j
            if members.any():
                centres[j] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(n), labels]))
                centres[j] = X[far]
                labels[far] = j
    return InducingSet(Z=centres, labels=labels, objective_history=history)


def _inducing_basis(Z: np.ndarray, kern: KernelSpec) -> np.ndarray:
    """``T`` with ``T T^T`` the pseudo-inverse of ``K_MM`` on its numerical range.

    Inducing inputs close together make ``K_MM`` singular to working
    precision; dropping its negligible eigen-directions keeps ``K_NM T``
    bounded where jitter would bias every entry.
    """
    Kmm = covariance(Z, Z, kern)
    if not np.all(np.isfinite(Kmm)):
        raise NumericalError("inducing covariance K_MM has non-finite entries")
    w, U = np.linalg.eigh(0.5 * (Kmm + Kmm.T))
    if not w[-1] > 0:
        raise NumericalError("inducing covariance K_MM is not positive definite")
    keep = w > EIG_RTOL * w[-1]
    return U[:, keep] / np.sqrt(w[keep])


def _fitc_factors(X, Z, theta: HyperConfig, kernel: Optional[KernelSpec]):
    kern = kernel or theta.kernel()
    X, Z = _as_2d(X), _as_2d(Z)
    T = _inducing_basis(Z, kern)
    Knm = covariance(X, Z, kern)
    P = Knm @ T
    lam = cov_diag(X, kern) - np.einsum("ij,ij->i", P, P)
    return kern, T, Knm, P, lam


def fitc_cloaking_matrix(X, X_star, Z, theta: HyperConfig,
                         kernel: Optional[KernelSpec] = None):
    """Return ``(C, parts)`` with ``C = k_*m^T Q_MM^-1 K_MN (Lambda + s2 I)^-1``.

    Evaluated in the feature form ``C = P_* A^-1 P^T D^-1`` with
    ``P = K_NM T``, ``A = I + P^T D^-1 P`` and ``D = Lambda + s2 I``, which
    equals the expression above whenever ``K_MM`` is invertible.
    """
    Z = Z.Z if isinstance(Z, InducingSet) else Z
    sigma2 = float(theta.noise_variance)
    if not sigma2 > 0:
        raise ValueError("FITC needs a positive noise variance")
    kern, T, Knm, P, lam = _fitc_factors(X, Z, theta, kernel)
    D = np.maximum(lam, 0.0) + sigma2
    La = cholesky(np.eye(P.shape[1]) + (P.T / D) @ P, what="FITC inner matrix")
    P_star = covariance(X_star, _as_2d(Z), kern) @ T
    C = P_star @ chol_solve(La, P.T / D)
    Q = covariance(_as_2d(Z), _as_2d(Z), kern) + (Knm.T / D) @ Knm
    return C, FitcParts(Q_MM=0.5 * (Q + Q.T), Lambda=lam, sigma2=sigma2)


def fitc_predict_var(X_star, Z, theta: HyperConfig, X=None,
                     kernel: Optional[KernelSpec] = None,
                     include_noise: bool = True) -> np.ndarray:
    """Pointwise FITC predictive variance ``K_** - k^T (K_MM^-1 - Q_MM^-1) k (+ s2)``.

    Depends on inputs only.  ``X`` (the training inputs) is required; it is a
    keyword so the call reads like the prediction it describes.
    """
    if X is None:
        raise ValueError("fitc_predict_var needs the training inputs X")
    Z = Z.Z if isinstance(Z, InducingSet) else Z
    sigma2 = float(theta.noise_variance)
    kern, T, _, P, lam = _fitc_factors(X, Z, theta, kernel)
    D = np.maximum(lam, 0.0) + sigma2
    La = cholesky(np.eye(P.shape[1]) + (P.T / D) @ P, what="FITC inner matrix")
    P_star = covariance(X_star, _as_2d(Z), kern) @ T
    U = tri_solve(La, P_star.T)
    var = (cov_diag(X_star, kern) - np.einsum("ij,ij->i", P_star, P_star)
           + np.einsum("ij,ij->j", U, U))
    if np.any(var < -1e-8 * max(1.0, kern.variance)):
        raise NumericalError(f"FITC variance went negative ({var.min():.3g})")
    var = np.maximum(var, 0.0)
    return var + sigma2 if include_noise else var


def sor_features(X, Z, theta: HyperConfig, kernel: Optional[KernelSpec] = None) -> np.ndarray:
    """``Phi`` with ``Phi Phi^T = K_NM K_MM^-1 K_MN``."""
    Z = _as_2d(Z.Z if isinstance(Z, InducingSet) else Z)
    kern = kernel or theta.kernel()
    return covariance(X, Z, kern) @ _inducing_basis(Z, kern)


def sor_lowrank(X, Z, theta: HyperConfig, kernel: Optional[KernelSpec] = None) -> np.ndarray:
    """Rank-``M'`` surrogate ``K_NM K_MM^-1 K_MN`` for the training covariance."""
    Phi = sor_features(X, Z, theta, kernel)
    K = Phi @ Phi.T
    return 0.5 * (K + K.T)
