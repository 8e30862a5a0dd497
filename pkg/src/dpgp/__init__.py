"""Differentially private Gaussian processes with the cloaking mechanism.

Regression (dense, FITC and variable-lengthscale), binary classification
through one privatised Laplace step (dense and low-rank) and
exponential-mechanism hyperparameter selection.
"""

from ._linalg import NumericalError
from .classification import (ClassifyTask, LaplaceState, accuracy, classify, dp_laplace_fit,
                             dp_sparse_classify, laplace_cloaking_matrix, predict_class_prob,
                             predict_latent)
from .cloaking import (CloakingResult, ConvergenceWarning, PrivacySpec, c_delta, cloak,
                       cloaking_matrix, delta_bound, dp_noise_sample, optimize_M)
from .hyperselect import (ConfigGrid, SelectionTable, build_selection_table, cross_val_sse,
                          epsilon_sweep, expected_rmse, select_config, selection_probabilities,
                          sensitivity_bound)
from .kernels import (Family, HyperConfig, KernelSpec, LengthscaleFunction, covariance, eq_cov,
                      gibbs_cov, lengthscale_at, weighted_sum_cov)
from .regression import (DPPrediction, RegressionTask, dp_gp_regress, dp_sparse_regress,
                         regress, rmse_cv)
from .sparse import (FitcParts, InducingSet, fitc_cloaking_matrix, fitc_predict_var,
                     kmeans_place, sor_lowrank)

__version__ = "0.1.0"
