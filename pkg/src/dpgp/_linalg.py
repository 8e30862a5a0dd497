"""Factorisation helpers shared by the GP and cloaking code."""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

# relative to the mean of the diagonal
JITTER = 1e-8
MAX_JITTER = 1e-2


class NumericalError(RuntimeError):
    """A matrix could not be factorised, or an iteration produced garbage."""


def cholesky(A: np.ndarray, jitter: float = 0.0, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of ``A`` with jitter escalation.

    ``jitter`` is relative to the mean diagonal and is always applied. If the
    factorisation fails, jitter is raised to at least ``JITTER`` and then
    multiplied by ten until it succeeds or reaches ``MAX_JITTER``.
    """
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + A.T)
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    if not np.isfinite(scale):
        raise NumericalError(f"{what} has non-finite entries")
    if scale <= 0:
        scale = 1.0
    rel = jitter
    while True:
        try:
            if rel > 0:
                return np.linalg.cholesky(A + rel * scale * np.eye(A.shape[0]))
            return np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            rel = JITTER if rel < JITTER else rel * 10
            if rel > MAX_JITTER:
                raise NumericalError(
                    f"{what} is not positive definite even with jitter "
                    f"{MAX_JITTER:g} x mean diagonal"
                ) from None


def chol_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return sla.cho_solve((L, True), B)


def tri_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``L X = B`` for lower-triangular ``L``."""
    return sla.solve_triangular(L, B, lower=True)
