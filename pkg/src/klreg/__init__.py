"""Invariant linear coefficients from multiple confounded environments.

Data observed across environments that share one structural model but
differ in noise covariances lets a covariance-matching objective separate
the invariant covariate-to-response coefficient from the confounding
contributed by latent variables. The package provides the closed-form
estimator, an L1-penalized variant with path and cross-fitted penalty
selection, scikit-learn estimator wrappers, reference baselines and
metrics, and a declarative experiment harness with a CLI.
"""

from .core import (
    KlFit,
    SolvabilityReport,
    fit_kl,
    gaussian_kl,
    gaussian_kl_triplet,
    kl_loss,
    kl_loss_gradients,
    minimize_kl_loss,
    pi_map,
    pooled_theta,
    robustness_bound,
    robustness_constant,
    s_beta_matrix,
    s_beta_solvable,
)
from .errors import (
    ConvergenceError,
    EmptyRankingError,
    IllPosedError,
    IngestionError,
    KlRegressionError,
    SingularCovarianceError,
)
from .estimators import KLRegressor, LassoKLRegressor
from .harness import (
    ESTIMATORS,
    KINDS,
    ExperimentConfig,
    ExperimentReport,
    desk_config,
    ingest_environments,
    ingest_expression,
    per_target_datasets,
    rank_edges,
    run_experiment,
)
from .lasso import (
    LassoConfig,
    LassoPath,
    default_grid,
    fit_lasso,
    lambda_max,
    lasso_path,
    select_lambda_cross_fit,
)
from .metrics import (
    EdgeRanking,
    SupportMetrics,
    aupr,
    average_ols,
    mse,
    ols_per_environment,
    pr_curve,
    support_metrics,
)
from .moments import (
    EnvironmentMoments,
    estimate_moments,
    joint_covariance,
    moments_from_covariance,
    moments_from_triplet,
)
from .sem import (
    EnvironmentData,
    EnvironmentNoiseSpec,
    PopulationMoments,
    SemModel,
    derive_rng,
    generate_baseline_model,
    generate_environment_noise,
    perturb_model,
    population_moments,
    sample_environment,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "EdgeRanking",
    "EmptyRankingError",
    "EnvironmentData",
    "EnvironmentMoments",
    "EnvironmentNoiseSpec",
    "ESTIMATORS",
    "ExperimentConfig",
    "ExperimentReport",
    "IllPosedError",
    "IngestionError",
    "KINDS",
    "KLRegressor",
    "KlFit",
    "KlRegressionError",
    "LassoConfig",
    "LassoKLRegressor",
    "LassoPath",
    "PopulationMoments",
    "SemModel",
    "SingularCovarianceError",
    "SolvabilityReport",
    "SupportMetrics",
    "aupr",
    "average_ols",
    "default_grid",
    "derive_rng",
    "desk_config",
    "estimate_moments",
    "fit_kl",
    "fit_lasso",
    "gaussian_kl",
    "gaussian_kl_triplet",
    "generate_baseline_model",
    "generate_environment_noise",
    "ingest_environments",
    "ingest_expression",
    "joint_covariance",
    "kl_loss",
    "kl_loss_gradients",
    "lambda_max",
    "lasso_path",
    "minimize_kl_loss",
    "moments_from_covariance",
    "moments_from_triplet",
    "mse",
    "ols_per_environment",
    "per_target_datasets",
    "perturb_model",
    "pi_map",
    "pooled_theta",
    "population_moments",
    "pr_curve",
    "rank_edges",
    "robustness_bound",
    "robustness_constant",
    "run_experiment",
    "s_beta_matrix",
    "s_beta_solvable",
    "sample_environment",
    "select_lambda_cross_fit",
    "support_metrics",
]
