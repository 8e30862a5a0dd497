"""The cloaking mechanism: Gaussian output perturbation shaped by the cloaking matrix.

A linear predictor ``y_* = C y`` is released as ``y_* + (c(delta) Delta / eps) Z``
with ``Z ~ N(0, M)``.  Changing one private output by ``d`` moves the
prediction by ``d c_i`` (one column of ``C``), so

    Delta = d * max_i sqrt(c_i^T M^-1 c_i)

bounds the Mahalanobis size of any neighbouring change.  ``M`` is chosen as
``sum_i lambda_i c_i c_i^T`` with ``lambda`` maximising
``log det M - sum(lambda)``; at the optimum ``c_i^T M^-1 c_i = 1`` for every
column that carries weight and ``<= 1`` for the rest.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg as sla

from ._linalg import NumericalError, chol_solve, cholesky, tri_solve

LAMBDA_MIN = 1e-10
M_JITTER = 1e-10  # relative to trace(M) / P
RANK_RTOL = 1e-10


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PrivacySpec:
    epsilon: float
    delta: float
    sensitivity: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.sensitivity > 0:
            raise ValueError(f"data sensitivity must be positive, got {self.sensitivity}")

    def split(self, parts: int) -> "PrivacySpec":
        """Equal share of (epsilon, delta) for one of ``parts`` sequential releases."""
        return PrivacySpec(self.epsilon / parts, self.delta / parts, self.sensitivity)


@dataclass
class CloakingResult:
    C: np.ndarray
    lam: np.ndarray
    M: np.ndarray
    Delta: float
    noise_scale: float
    sensitivity: float = 1.0
    grad_norm: float = 0.0
    iterations: int = 0
    _chol: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = cholesky(self.M, what="noise covariance M")
        return self._chol

    @property
    def noise_std(self) -> np.ndarray:
        """Per-output standard deviation of the added noise."""
        return self.noise_scale * np.sqrt(np.diag(self.M))


class OptimizeResult(NamedTuple):
    lam: np.ndarray
    M: np.ndarray
    grad_norm: float
    iterations: int


def cloaking_matrix(K_star_f: np.ndarray, K: np.ndarray) -> np.ndarray:
    """``C = K_*f K^-1``; ``K`` must already include the observation noise."""
    L = cholesky(K, what="training covariance")
    return chol_solve(L, np.asarray(K_star_f, dtype=float).T).T


def c_delta(delta: float) -> float:
    """Smallest admissible ``c(delta) = sqrt(2 ln(2 / delta))``."""
    if not 0 < delta <= 2:
        raise ValueError(f"delta must lie in (0, 2], got {delta}")
    return math.sqrt(2.0 * math.log(2.0 / delta))


def assemble_M(C: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """``sum_j lam_j c_j c_j^T`` plus ``M_JITTER * trace / P`` on the diagonal."""
    M = (C * lam) @ C.T
    M = 0.5 * (M + M.T)
    M[np.diag_indices_from(M)] += M_JITTER * np.trace(M) / M.shape[0]
    return M


def column_scores(C: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``c_j^T M^-1 c_j`` for every column."""
    L = cholesky(M, what="noise covariance M")
    V = tri_solve(L, C)
    return np.einsum("ij,ij->j", V, V)


def _whiten(C: np.ndarray) -> np.ndarray:
    # The optimal lambda is unchanged by any invertible map of C's column
    # space, so work with an orthonormal basis of the row space instead.
    _, s, vt = np.linalg.svd(C, full_matrices=False)
    r = int(np.sum(s > RANK_RTOL * s[0]))
    return vt[:r]


def _evaluate(B: np.ndarray, lam: np.ndarray):
    M = (B * lam) @ B.T
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        L = cholesky(M, jitter=1e-12, what="reduced noise covariance")
    V = tri_solve(L, B)
    g = np.einsum("ij,ij->j", V, V)
    objective = 2.0 * np.sum(np.log(np.diag(L))) - lam.sum()
    return V, g, objective


def _projected_gradient(lam: np.ndarray, g: np.ndarray) -> np.ndarray:
    grad = 1.0 - g  # d(-objective) / d lambda_j
    at_floor = lam <= LAMBDA_MIN * (1 + 1e-6)
    grad[at_floor & (grad > 0)] = 0.0
    return grad


def optimize_noise(C, iterations: int = 200, step_size: float = 0.05,
                   method: str = "newton", tol: float = 1e-9,
                   warm_start: int = 20) -> OptimizeResult:
    """Optimise the weights ``lambda`` of ``M = sum_j lambda_j c_j c_j^T``.

    Every method follows the gradient ``-c_j^T M^-1 c_j + 1`` of the negated
    objective ``-(log det M - sum lambda)``, projected onto
    ``lambda >= LAMBDA_MIN``, starting from ``lambda = 1/N``.

    ``method="gradient"`` takes plain steps of length ``step_size``.
    ``method="newton"`` (default) first runs ``warm_start`` fixed-point
    sweeps ``lambda_j <- lambda_j c_j^T M^-1 c_j`` (which keep the same
    stationary points and move weight off redundant columns without
    overshooting) and then takes projected Newton steps using the exact
    Hessian ``(c_i^T M^-1 c_j)^2``, damped Levenberg-Marquardt style because
    that Hessian is singular whenever ``N`` exceeds ``rank(C)(rank(C)+1)/2``.
    Plain gradient steps reach the stationarity tolerance far more slowly.

    A :class:`ConvergenceWarning` is emitted when the iteration cap is hit
    with ``max_j c_j^T M^-1 c_j > 1 + 1e-2``.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise ValueError("C must be a matrix")
    norms = np.einsum("ij,ij->j", C, C)
    if not np.any(norms > 0):
        raise ValueError("cloaking matrix has no nonzero column")
    if not np.all(np.isfinite(C)):
        raise NumericalError("cloaking matrix has non-finite entries")
    if method not in ("newton", "gradient"):
        raise ValueError(f"unknown method {method!r}")

    B = _whiten(C)
    n = C.shape[1]
    lam = np.full(n, 1.0 / n)
    V, g, obj = _evaluate(B, lam)
    it = 0
    if method == "newton":
        for it in range(1, min(warm_start, iterations) + 1):
            lam = np.maximum(lam * g, LAMBDA_MIN)
            V, g, obj = _evaluate(B, lam)
        mu = 1e-3
        while it < iterations and g.max() > 1 + tol:
            it += 1
            ascent = g - 1.0
            free = (lam > LAMBDA_MIN * (1 + 1e-6)) | (ascent > 0)
            G = V.T @ V
            H = (G * G)[np.ix_(free, free)]
            scale = np.diag(np.diag(H))
            for _ in range(30):
                step = np.zeros(n)
                try:
                    step[free] = sla.cho_solve(sla.cho_factor(H + mu * scale, lower=True),
                                               ascent[free])
                except np.linalg.LinAlgError:
                    mu *= 4
                    continue
                trial = np.maximum(lam + step, LAMBDA_MIN)
                V2, g2, obj2 = _evaluate(B, trial)
                if obj2 > obj:
                    mu = max(mu / 3, 1e-12)
                    break
                mu *= 4
            else:
                break  # no damping level improves the objective
            lam, V, g, obj = trial, V2, g2, obj2
    else:
        for it in range(1, iterations + 1):
            lam = np.maximum(lam - step_size * (1.0 - g), LAMBDA_MIN)
            V, g, obj = _evaluate(B, lam)

    M = assemble_M(C, lam)
    scores = column_scores(C, M)
    grad_norm = float(np.linalg.norm(_projected_gradient(lam, scores)))
    if scores.max() > 1 + 1e-2 and it >= iterations:
        warnings.warn(
            f"noise covariance optimisation stopped after {it} iterations with "
            f"max c^T M^-1 c = {scores.max():.4g} (projected gradient norm {grad_norm:.3g})",
            ConvergenceWarning, stacklevel=2)
    return OptimizeResult(lam, M, grad_norm, it)


def optimize_M(C, iterations: int = 200, step_size: float = 0.05, **kwargs):
    """Return ``(lambda, M)``; see :func:`optimize_noise`."""
    res = optimize_noise(C, iterations, step_size, **kwargs)
    return res.lam, res.M


def delta_bound(C, M, d: float) -> float:
    """``d * max_j sqrt(c_j^T M^-1 c_j)``."""
    return float(d * np.sqrt(np.max(column_scores(np.asarray(C, dtype=float), M))))


def noise_scale(Delta: float, privacy: PrivacySpec) -> float:
    if math.isinf(privacy.epsilon):
        return 0.0
    return c_delta(privacy.delta) * Delta / privacy.epsilon


def cloak(C, privacy: PrivacySpec, iterations: int = 200, step_size: float = 0.05,
          **kwargs) -> CloakingResult:
    """Optimise ``M`` for ``C`` and calibrate the noise scale for ``privacy``."""
    C = np.asarray(C, dtype=float)
    res = optimize_noise(C, iterations, step_size, **kwargs)
    L = cholesky(res.M, what="noise covariance M")
    V = tri_solve(L, C)
    Delta = float(privacy.sensitivity * np.sqrt(np.max(np.einsum("ij,ij->j", V, V))))
    return CloakingResult(C=C, lam=res.lam, M=res.M, Delta=Delta,
                          noise_scale=noise_scale(Delta, privacy),
                          sensitivity=privacy.sensitivity,
                          grad_norm=res.grad_norm, iterations=res.iterations, _chol=L)


def dp_noise_sample(result: CloakingResult, privacy: PrivacySpec,
                    rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Draw from ``N(0, (c(delta) Delta / eps)^2 M)``.

    ``Delta`` is rescaled to ``privacy.sensitivity`` so one optimised ``M``
    can serve several privacy settings.  Returns shape ``(P,)`` or
    ``(size, P)``.
    """
    Delta = result.Delta * privacy.sensitivity / result.sensitivity
    scale = noise_scale(Delta, privacy)
    P = result.M.shape[0]
    z = rng.standard_normal(P if size is None else (size, P))
    return scale * (z @ result.chol.T)
