"""Scikit-learn estimator wrappers around the multi-environment core.

Both estimators take the usual (X, y) plus a per-sample `environments`
label array at fit time, so they slot into pipelines and model-selection
code that forwards fit parameters. Prediction uses the fitted invariant
coefficient with a pooled intercept; the point of these models is the
coefficient itself, so `coef_` and `eta_` are the main outputs.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import fit_kl
from .lasso import LassoConfig, default_grid, fit_lasso, lambda_max, select_lambda_cross_fit
from .moments import estimate_moments
from .validation import split_environments


class KLRegressor(RegressorMixin, BaseEstimator):
    """Closed-form invariant-coefficient estimator.

    Parameters
    ----------
    with_variance : bool
        Also compute the conditional covariance of the coefficient
        (available as `cov_`).
    jitter : float
        Optional ridge term added to each environment's covariate
        covariance before inversion; off by default.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
        The invariant coefficient.
    eta_ : ndarray of shape (n_features,)
        The confounding direction.
    intercept_ : float
        Pooled intercept, mean(y) - mean(X) @ coef_ over all samples.
    cond_s_beta_ : float
        Condition number of the scaling matrix (a diversity diagnostic).
    cov_ : ndarray or None
        Conditional covariance of the coefficient when requested.
    """

    def __init__(self, with_variance=False, jitter=0.0):
        self.with_variance = with_variance
        self.jitter = jitter

    def fit(self, X, y, environments=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if environments is None:
            raise ValueError("fit requires an `environments` label per sample")
        datasets = split_environments(X, y, environments)
        moments = [estimate_moments(d, jitter=self.jitter) for d in datasets]
        result = fit_kl(moments, with_variance=self.with_variance)
        self.coef_ = result.beta
        self.eta_ = result.eta
        self.s_beta_ = result.s_beta
        self.cond_s_beta_ = result.cond_s_beta
        self.cov_ = result.cov
        self.loss_ = result.loss_at_opt
        self.intercept_ = float(y.mean() - X.mean(axis=0) @ result.beta)
        self.environments_ = [d.env_id for d in datasets]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_ + self.intercept_


class LassoKLRegressor(RegressorMixin, BaseEstimator):
    """L1-penalized invariant-coefficient estimator.

    Parameters
    ----------
    lam : float or "auto"
        Penalty strength. "auto" selects it by within-environment
        cross-fitting over a log-spaced grid anchored at the smallest
        penalty that zeroes every coefficient.
    grid_size, grid_min_ratio : int, float
        Grid resolution and lower endpoint (relative to the anchor) used
        when lam="auto".
    folds : int
        Cross-fitting folds (split within each environment).
    max_iter, tol : int, float
        Solver controls.
    jitter : float
        Optional ridge term for the per-environment covariances.
    random_state : int
        Seed for the cross-fitting splits.
    """

    def __init__(
        self,
        lam="auto",
        grid_size=30,
        grid_min_ratio=1e-4,
        folds=2,
        max_iter=10_000,
        tol=1e-8,
        jitter=0.0,
        random_state=0,
    ):
        self.lam = lam
        self.grid_size = grid_size
        self.grid_min_ratio = grid_min_ratio
        self.folds = folds
        self.max_iter = max_iter
        self.tol = tol
        self.jitter = jitter
        self.random_state = random_state

    def fit(self, X, y, environments=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if environments is None:
            raise ValueError("fit requires an `environments` label per sample")
        datasets = split_environments(X, y, environments)
        moments = [estimate_moments(d, jitter=self.jitter) for d in datasets]
        if self.lam == "auto":
            grid = default_grid(lambda_max(moments), self.grid_size, self.grid_min_ratio)
            lam = select_lambda_cross_fit(
                datasets,
                grid,
                folds=self.folds,
                seed=self.random_state,
                jitter=self.jitter,
                max_iter=self.max_iter,
                tol=self.tol,
            )
        else:
            lam = float(self.lam)
        result = fit_lasso(
            moments, LassoConfig(lam=lam, max_iter=self.max_iter, tol=self.tol)
        )
        self.coef_ = result.beta
        self.eta_ = result.eta
        self.lambda_ = lam
        self.kkt_residual_ = result.kkt_residual
        self.n_iter_ = result.n_iter
        self.intercept_ = float(y.mean() - X.mean(axis=0) @ result.beta)
        self.environments_ = [d.env_id for d in datasets]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return X @ self.coef_ + self.intercept_
