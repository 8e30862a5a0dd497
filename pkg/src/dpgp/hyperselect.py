"""Private hyperparameter selection with the exponential mechanism.

Each configuration is scored by the negated cross-validated sum of squared
errors of its (optionally DP-noised) predictions, with every error clipped
to ``[-4d, 4d]``.  How much one person can move that score depends on the
fold cloaking matrices, which are functions of the public inputs alone:

    Delta_u = 9 d^2 + d^2 * (sum of the kappa - 1 largest alpha_k),
    alpha_k = max_j |c_j^(k)|^2,

so configurations with an unusually large ``Delta_u`` may be dropped before
sampling without spending privacy.  The mechanism uses the largest
``Delta_u`` among the kept configurations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .cloaking import CloakingResult, PrivacySpec, cloak, cloaking_matrix, noise_scale
from .kernels import HyperConfig, _as_2d, covariance
from .regression import fold_indices

CLIP_MULTIPLE = 4.0
DEFAULT_THRESHOLD_FACTOR = 10.0


@dataclass
class ConfigGrid:
    """The candidate set and the selection settings.

    ``privacy`` governs the DP noise added to the regression predictions
    (``None`` scores clean predictions); ``epsilon_select`` is spent by the
    mechanism.  ``sensitivity_threshold=None`` means ten times the median
    ``Delta_u`` over the grid.
    """

    configs: list
    kappa: int = 5
    d: float = 1.0
    epsilon_select: float = 1.0
    sensitivity_threshold: Optional[float] = None
    noise_draws: int = 100
    privacy: Optional[PrivacySpec] = None
    prior_mean: float = 0.0
    cloak_iterations: int = 200

    def __post_init__(self):
        if not self.configs:
            raise ValueError("config grid is empty")
        if self.kappa < 2:
            raise ValueError(f"kappa must be at least 2, got {self.kappa}")
        if not self.d > 0:
            raise ValueError("d must be positive")
        if not self.epsilon_select > 0:
            raise ValueError("epsilon_select must be positive")

    @classmethod
    def from_axes(cls, lengthscales: Sequence[float], noise_variances: Sequence[float],
                  kernel_variances: Sequence[float], **kwargs) -> "ConfigGrid":
        """Cartesian product, lengthscale varying slowest."""
        configs = [HyperConfig(ls, kv, nv) for ls, nv, kv
                   in itertools.product(lengthscales, noise_variances, kernel_variances)]
        return cls(configs, **kwargs)

    def __len__(self) -> int:
        return len(self.configs)


@dataclass
class SelectionTable:
    configs: list
    sse: np.ndarray
    alpha: np.ndarray
    delta_u: np.ndarray
    probability: np.ndarray
    excluded: np.ndarray
    global_delta_u: float
    rmse: Optional[np.ndarray] = None
    chosen: Optional[int] = None

    def rows(self) -> list:
        """One dict per configuration, in grid order."""
        out = []
        for i, th in enumerate(self.configs):
            out.append({
                "lengthscale": th.lengthscale_scalar,
                "noise_var": th.noise_variance,
                "kernel_var": th.kernel_variance,
                "sse": float(self.sse[i]),
                "delta_u": float(self.delta_u[i]),
                "excluded": bool(self.excluded[i]),
                "probability": float(self.probability[i]),
                "rmse": None if self.rmse is None else float(self.rmse[i]),
            })
        return out


@dataclass
class FoldPieces:
    """Per-fold quantities of one configuration that do not depend on epsilon."""

    C: list
    clean: list
    targets: list
    cloaking: list = field(default_factory=list)


def _fold_pieces(X, y, theta: HyperConfig, folds, prior_mean: float) -> FoldPieces:
    X = _as_2d(X)
    n = X.shape[0]
    kern = theta.kernel()
    Cs, cleans, targets = [], [], []
    for k, test in enumerate(folds):
        if len(test) == 0:
            raise ValueError(f"fold {k} is empty")
        train = np.setdiff1d(np.arange(n), test)
        if train.size == 0:
            raise ValueError(f"fold {k} leaves no training points")
        K = covariance(X[train], X[train], kern)
        K[np.diag_indices_from(K)] += theta.noise_variance
        C = cloaking_matrix(covariance(X[test], X[train], kern), K)
        Cs.append(C)
        cleans.append(prior_mean + C @ (y[train] - prior_mean))
        targets.append(y[test])
    return FoldPieces(Cs, cleans, targets)


def fold_alpha(pieces: FoldPieces) -> np.ndarray:
    """``alpha_k = max_j |c_j^(k)|^2`` over the training columns of each fold."""
    return np.array([float(np.max(np.einsum("ij,ij->j", C, C))) for C in pieces.C])


def clipped_sse(pred, target, d: float) -> float:
    e = np.clip(np.asarray(pred) - np.asarray(target), -CLIP_MULTIPLE * d, CLIP_MULTIPLE * d)
    return float(np.sum(e * e))


def cross_val_sse(X, y, theta: HyperConfig, kappa: int, d: float, noise_draws: int = 0,
                  rng: Optional[np.random.Generator] = None, privacy: Optional[PrivacySpec] = None,
                  folds=None, prior_mean: float = 0.0, cloak_iterations: int = 200):
    """Return ``(sse, alpha)`` for one configuration.

    ``folds`` (a list of held-out index arrays) defaults to a seeded shuffle
    split into ``kappa`` parts.  With ``noise_draws > 0`` and a finite
    ``privacy.epsilon`` every fold's predictions are cloaked and the SSE is
    averaged over that many noise draws.
    """
    rng = rng if rng is not None else np.random.default_rng()
    y = np.asarray(y, dtype=float)
    if folds is None:
        folds = fold_indices(len(y), kappa, rng)
    pieces = _fold_pieces(X, y, theta, folds, prior_mean)
    alpha = fold_alpha(pieces)
    noisy = noise_draws > 0 and privacy is not None and not math.isinf(privacy.epsilon)
    total = 0.0
    for C, clean, target in zip(pieces.C, pieces.clean, pieces.targets):
        if not noisy:
            total += clipped_sse(clean, target, d)
            continue
        res = cloak(C, privacy, iterations=cloak_iterations)
        z = rng.standard_normal((noise_draws, C.shape[0]))
        preds = clean + res.noise_scale * (z @ res.chol.T)
        total += np.mean([clipped_sse(p, target, d) for p in preds])
    if not math.isfinite(total):
        raise ValueError("cross-validated SSE is not finite")
    return float(total), alpha


def sensitivity_bound(alpha, d: float, order: str = "text") -> float:
    """``9 d^2 + d^2`` times the sum of ``kappa - 1`` fold sensitivities.

    ``order="text"`` (default) sums the largest ones; ``order="algorithm"``
    sorts ascending and sums the first ``kappa - 1``, i.e. the smallest.
    """
    alpha = np.sort(np.asarray(alpha, dtype=float))
    kappa = alpha.size
    if kappa < 2:
        raise ValueError("need at least two folds")
    if order == "text":
        chosen = alpha[::-1][:kappa - 1]
    elif order == "algorithm":
        chosen = alpha[:kappa - 1]
    else:
        raise ValueError(f"unknown order {order!r}")
    return float(9.0 * d * d + d * d * np.sum(chosen))


def default_threshold(delta_u) -> float:
    return DEFAULT_THRESHOLD_FACTOR * float(np.median(delta_u))


def selection_probabilities(sse, delta_u, epsilon: float, threshold: Optional[float] = None):
    """Exponential-mechanism probabilities for utilities ``-sse``.

    Returns ``(probability, excluded, global_delta_u)``; excluded configs
    get probability 0.  An infinite ``epsilon`` puts all mass uniformly on
    the minimum-SSE configs.
    """
    sse = np.asarray(sse, dtype=float)
    delta_u = np.asarray(delta_u, dtype=float)
    excluded = np.zeros(sse.size, dtype=bool) if threshold is None else delta_u > threshold
    if excluded.all():
        raise ValueError("every configuration exceeds the sensitivity threshold")
    keep = ~excluded
    du = float(delta_u[keep].max())
    prob = np.zeros(sse.size)
    if math.isinf(epsilon):
        best = keep & (sse == sse[keep].min())
        prob[best] = 1.0 / best.sum()
        return prob, excluded, du
    logits = epsilon * (-sse[keep]) / (2.0 * du)
    prob[keep] = np.exp(logits - logsumexp(logits))
    return prob, excluded, du


def select_config(probability, rng: np.random.Generator) -> int:
    p = np.asarray(probability, dtype=float)
    return int(rng.choice(p.size, p=p / p.sum()))


def expected_rmse(probability, rmse_per_config) -> float:
    """Probability-weighted RMSE over the grid."""
    p = np.asarray(probability, dtype=float)
    return float(np.dot(p, np.asarray(rmse_per_config, dtype=float)) / p.sum())


def holdout_rmse(X, y, X_hold, y_hold, theta: HyperConfig, privacy: Optional[PrivacySpec],
                 rng: np.random.Generator, noise_draws: int = 25, prior_mean: float = 0.0,
                 cloak_iterations: int = 200) -> float:
    """RMSE on ``(X_hold, y_hold)`` of a model trained on ``(X, y)``, noise averaged."""
    X, X_hold = _as_2d(X), _as_2d(X_hold)
    kern = theta.kernel()
    K = covariance(X, X, kern)
    K[np.diag_indices_from(K)] += theta.noise_variance
    C = cloaking_matrix(covariance(X_hold, X, kern), K)
    clean = prior_mean + C @ (np.asarray(y) - prior_mean)
    if privacy is None or math.isinf(privacy.epsilon) or noise_draws < 1:
        return float(np.sqrt(np.mean((clean - y_hold) ** 2)))
    res = cloak(C, privacy, iterations=cloak_iterations)
    z = rng.standard_normal((noise_draws, C.shape[0]))
    preds = clean + res.noise_scale * (z @ res.chol.T)
    return float(np.sqrt(np.mean((preds - y_hold) ** 2)))


def build_selection_table(X, y, grid: ConfigGrid, rng: np.random.Generator,
                          X_hold=None, y_hold=None, folds=None) -> SelectionTable:
    """Score every config, derive probabilities and sample one.

    All configurations share one fold split.  When a holdout set is given,
    each configuration's holdout RMSE (trained on all of ``X``) is recorded
    for :func:`expected_rmse`.
    """
    y = np.asarray(y, dtype=float)
    if folds is None:
        folds = fold_indices(len(y), grid.kappa, rng)
    n_cfg = len(grid.configs)
    sse = np.empty(n_cfg)
    alpha = np.empty((n_cfg, grid.kappa))
    for i, theta in enumerate(grid.configs):
        sse[i], alpha[i] = cross_val_sse(X, y, theta, grid.kappa, grid.d, grid.noise_draws, rng,
                                         grid.privacy, folds, grid.prior_mean,
                                         grid.cloak_iterations)
    delta_u = np.array([sensitivity_bound(a, grid.d) for a in alpha])
    thr = grid.sensitivity_threshold if grid.sensitivity_threshold is not None \
        else default_threshold(delta_u)
    prob, excluded, du = selection_probabilities(sse, delta_u, grid.epsilon_select, thr)
    rmse = None
    if X_hold is not None:
        rmse = np.array([holdout_rmse(X, y, X_hold, y_hold, th, grid.privacy, rng,
                                      min(grid.noise_draws, 25), grid.prior_mean,
                                      grid.cloak_iterations)
                         for th in grid.configs])
    chosen = select_config(prob, rng)
    return SelectionTable(list(grid.configs), sse, alpha, delta_u, prob, excluded, du, rmse, chosen)


@dataclass
class EpsilonSweep:
    epsilons: np.ndarray
    lengthscales: np.ndarray
    probability: np.ndarray  # (n_eps, n_lengthscales)

    @property
    def mean_log_lengthscale(self) -> np.ndarray:
        return self.probability @ np.log(self.lengthscales)


def epsilon_sweep(X, y, grid: ConfigGrid, epsilon_list: Sequence[float],
                  rng: np.random.Generator, folds=None) -> EpsilonSweep:
    """Lengthscale marginals of the selection distribution for each epsilon.

    Each epsilon is used both for the regression noise inside the SSE and
    for the mechanism (``grid.privacy`` supplies delta and d; an infinite
    epsilon scores clean predictions and selects the argmax).  Noise
    covariances are optimised once per config and fold, and the same
    standard-normal draws are reused across epsilons so only the noise
    scale changes.
    """
    y = np.asarray(y, dtype=float)
    if folds is None:
        folds = fold_indices(len(y), grid.kappa, rng)
    base = grid.privacy or PrivacySpec(1.0, 0.01, grid.d)
    eps = np.asarray(list(epsilon_list), dtype=float)
    n_cfg = len(grid.configs)
    sse = np.zeros((eps.size, n_cfg))
    delta_u = np.empty(n_cfg)
    for i, theta in enumerate(grid.configs):
        pieces = _fold_pieces(X, y, theta, folds, grid.prior_mean)
        delta_u[i] = sensitivity_bound(fold_alpha(pieces), grid.d)
        for C, clean, target in zip(pieces.C, pieces.clean, pieces.targets):
            res: CloakingResult = cloak(C, base, iterations=grid.cloak_iterations)
            noise = rng.standard_normal((max(grid.noise_draws, 1), C.shape[0])) @ res.chol.T
            for e, epsilon in enumerate(eps):
                if math.isinf(epsilon) or grid.noise_draws < 1:
                    sse[e, i] += clipped_sse(clean, target, grid.d)
                    continue
                scale = noise_scale(res.Delta, PrivacySpec(epsilon, base.delta, base.sensitivity))
                sse[e, i] += np.mean([clipped_sse(clean + scale * z, target, grid.d) for z in noise])
    thr = grid.sensitivity_threshold if grid.sensitivity_threshold is not None \
        else default_threshold(delta_u)
    ls_values = np.array(sorted({th.lengthscale_scalar for th in grid.configs}))
    ls_index = np.searchsorted(ls_values, [th.lengthscale_scalar for th in grid.configs])
    marg = np.zeros((eps.size, ls_values.size))
    for e, epsilon in enumerate(eps):
        prob, _, _ = selection_probabilities(sse[e], delta_u, epsilon, thr)
        np.add.at(marg[e], ls_index, prob)
    return EpsilonSweep(eps, ls_values, marg)
