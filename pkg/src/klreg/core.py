"""Closed-form invariant-coefficient estimation across environments.

The loss compares, per environment, the covariance implied by a candidate
coefficient against the observed joint covariance, using the Gaussian
Kullback-Leibler divergence. Writing the per-environment coefficient as
beta + inv(sigma_x) @ eta splits off the confounding direction eta, and the
joint minimizer over (beta, eta) has a closed form whenever the scaling
matrix s_beta is invertible. This module implements that closed form, the
loss and its gradients, solvability diagnostics, the estimator's conditional
covariance, and the misspecification bound.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .errors import IllPosedError
from .linalg import (
    as_vector,
    check_symmetric,
    cholesky_spd,
    logdet_spd,
    spd_inverse,
    spd_solve,
    symmetrize,
)
from .moments import EnvironmentMoments

COND_THRESHOLD = 1e12


def pi_map(sigma_x, resid_var, theta) -> np.ndarray:
    """Joint covariance implied by regressors (sigma_x, resid_var) and theta.

        [[ sigma_x,            sigma_x theta          ],
         [ theta' sigma_x,     resid_var + theta' sigma_x theta ]]

    Symmetric positive definite for SPD sigma_x and resid_var > 0; its
    determinant equals resid_var * det(sigma_x).
    """
    sigma_x = np.atleast_2d(np.asarray(sigma_x, dtype=float))
    d = sigma_x.shape[0]
    theta = as_vector(theta, d, "theta")
    resid_var = float(resid_var)
    if resid_var <= 0:
        raise ValueError("resid_var must be positive")
    out = np.empty((d + 1, d + 1))
    out[:d, :d] = sigma_x
    cross = sigma_x @ theta
    out[:d, d] = cross
    out[d, :d] = cross
    out[d, d] = resid_var + float(theta @ cross)
    return out


def gaussian_kl(sigma1, sigma2) -> float:
    """KL divergence between centered Gaussians with the given covariances."""
    sigma1 = check_symmetric(np.atleast_2d(np.asarray(sigma1, dtype=float)), name="sigma1")
    sigma2 = check_symmetric(np.atleast_2d(np.asarray(sigma2, dtype=float)), name="sigma2")
    if sigma1.shape != sigma2.shape:
        raise ValueError("covariances must have matching shapes")
    d = sigma1.shape[0]
    logdet1 = logdet_spd(sigma1, name="sigma1")
    chol2 = cholesky_spd(sigma2, name="sigma2")
    logdet2 = 2.0 * float(np.sum(np.log(np.diag(chol2))))
    # tr(sigma2^-1 sigma1) via the Cholesky factor of sigma2
    half = sla.solve_triangular(chol2, sigma1, lower=True)
    trace = float(np.trace(sla.solve_triangular(chol2, half.T, lower=True)))
    return 0.5 * (logdet2 - logdet1 - d + trace)


def _triplet(m):
    if isinstance(m, EnvironmentMoments):
        return m.sigma_x, m.beta_e, m.resid_var
    sigma, beta, s2 = m
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    return sigma, as_vector(beta, sigma.shape[0], "beta"), float(s2)


def gaussian_kl_triplet(m1, m2) -> float:
    """Gaussian KL between joint laws given by moment triplets.

    Splits into a covariate part, a residual part and a Mahalanobis term in
    the coefficients; agrees with gaussian_kl on the assembled joints.
    """
    sigma1, beta1, s1 = _triplet(m1)
    sigma2, beta2, s2 = _triplet(m2)
    if s1 <= 0 or s2 <= 0:
        raise ValueError("residual variances must be positive")
    kl_x = gaussian_kl(sigma1, sigma2)
    kl_resid = 0.5 * (np.log(s2) - np.log(s1) - 1.0 + s1 / s2)
    diff = beta1 - beta2
    return kl_x + kl_resid + 0.5 * float(diff @ sigma1 @ diff) / s2


@dataclass(eq=False)
class _Aggregates:
    """Per-environment sums every closed-form expression is built from."""

    weight: float          # sum of 1/sigma_e^2
    sigma_sum: np.ndarray  # sum of sigma_e / sigma_e^2
    inv_sum: np.ndarray    # sum of sigma_e^-1 / sigma_e^2
    coef_sum: np.ndarray   # sum of beta_e / sigma_e^2
    sigma_coef_sum: np.ndarray  # sum of sigma_e beta_e / sigma_e^2
    sigmas: list           # per-environment sigma_e
    inverses: list         # per-environment sigma_e^-1
    resid_vars: np.ndarray
    ns: np.ndarray


def _resid_vars(envs, resid_vars):
    if resid_vars is None:
        return np.array([m.resid_var for m in envs], dtype=float)
    rv = as_vector(resid_vars, len(envs), "resid_vars")
    if np.any(rv <= 0):
        raise ValueError("resid_vars must be positive")
    return rv


def _aggregates(envs, resid_vars=None) -> _Aggregates:
    if len(envs) == 0:
        raise ValueError("at least one environment is required")
    d = envs[0].d
    rv = _resid_vars(envs, resid_vars)
    weight = 0.0
    sigma_sum = np.zeros((d, d))
    inv_sum = np.zeros((d, d))
    coef_sum = np.zeros(d)
    sigma_coef_sum = np.zeros(d)
    sigmas = []
    inverses = []
    for m, s2 in zip(envs, rv):
        if m.d != d:
            raise ValueError("environments disagree on the covariate dimension")
        inv = spd_inverse(m.sigma_x, name=f"sigma_x of {m.env_id or 'environment'}")
        sigmas.append(m.sigma_x)
        inverses.append(inv)
        weight += 1.0 / s2
        sigma_sum += m.sigma_x / s2
        inv_sum += inv / s2
        coef_sum += m.beta_e / s2
        sigma_coef_sum += (m.sigma_x @ m.beta_e) / s2
    sigma_sum = symmetrize(sigma_sum)
    inv_sum = symmetrize(inv_sum)
    ns = np.array([m.n for m in envs], dtype=int)
    return _Aggregates(
        weight, sigma_sum, inv_sum, coef_sum, sigma_coef_sum, sigmas, inverses, rv, ns
    )


def pooled_theta(envs) -> np.ndarray:
    """Precision-weighted pooled coefficient (ignores confounding).

    Minimizer of the unreparametrized covariance-matching loss over a single
    shared coefficient; biased whenever the confounding direction is nonzero.
    """
    agg = _aggregates(envs)
    return spd_solve(agg.sigma_sum, agg.sigma_coef_sum, name="pooled covariance sum")


def kl_loss(envs, beta, eta, resid_vars=None) -> float:
    """Value of the reparametrized loss at (beta, eta).

        L = sum_e (beta_e - beta - sigma_e^-1 eta)' sigma_e
                  (beta_e - beta - sigma_e^-1 eta) / (2 sigma_e^2)

    which is the per-environment Gaussian KL between the implied and the
    observed joint covariances (only the coefficient term survives because
    the regressors match).
    """
    d = envs[0].d
    beta = as_vector(beta, d, "beta")
    eta = as_vector(eta, d, "eta")
    rv = _resid_vars(envs, resid_vars)
    total = 0.0
    for m, s2 in zip(envs, rv):
        r = m.beta_e - beta - spd_solve(m.sigma_x, eta)
        total += float(r @ m.sigma_x @ r) / (2.0 * s2)
    return total


def kl_loss_gradients(envs, beta, eta, resid_vars=None):
    """Analytic gradients of kl_loss with respect to beta and eta."""
    d = envs[0].d
    beta = as_vector(beta, d, "beta")
    eta = as_vector(eta, d, "eta")
    agg = _aggregates(envs, resid_vars)
    grad_beta = agg.sigma_sum @ beta - agg.sigma_coef_sum + agg.weight * eta
    grad_eta = agg.inv_sum @ eta - agg.coef_sum + agg.weight * beta
    return grad_beta, grad_eta


def s_beta_matrix(envs) -> np.ndarray:
    """Scaling matrix whose invertibility identifies the invariant coefficient.

        s_beta = (sum_e sigma_e^-1/sigma_e^2)(sum_e sigma_e/sigma_e^2)
                 - (sum_e 1/sigma_e^2)^2 I

    Generally non-symmetric: it is a product of two symmetric matrices minus
    a scaled identity, and no solver here assumes symmetry.
    """
    agg = _aggregates(envs)
    return _s_beta(agg)


def _s_beta(agg: _Aggregates) -> np.ndarray:
    d = agg.sigma_sum.shape[0]
    return agg.inv_sum @ agg.sigma_sum - agg.weight**2 * np.eye(d)


def _scaled_cond(matrix, scale) -> float:
    """Condition number measured against an assembly scale.

    The scaling matrix is a difference of two same-magnitude terms, so near
    degeneracy it cancels to a tiny matrix whose raw condition number looks
    harmless; dividing the assembly scale by the smallest singular value
    keeps the diagnostic meaningful under cancellation.
    """
    smallest = float(np.linalg.svd(matrix, compute_uv=False)[-1])
    if smallest <= 0 or not np.isfinite(smallest):
        return float("inf")
    return scale / smallest


def s_beta_condition(agg: _Aggregates, s_beta) -> float:
    scale = float(np.linalg.norm(agg.inv_sum @ agg.sigma_sum, 2)) + agg.weight**2
    return _scaled_cond(s_beta, scale)


@dataclass
class SolvabilityReport:
    """Outcome of the s_beta invertibility diagnostic.

    witness is the index (into the environment list) of the first
    environment whose sufficient-condition matrix is invertible, or None if
    no environment certifies invertibility.
    """

    solvable: bool
    cond: float
    witness: int | None


def s_beta_solvable(envs, tol=1e-12) -> SolvabilityReport:
    """Check invertibility of s_beta and search for a certifying environment.

    s_beta counts as solvable when its (cancellation-aware) condition number
    is below 1/tol. The witness search evaluates, per environment e, the
    matrix

        sigma_e^-1 - (sum_f 1/sigma_f^2)^-1 (sum_f sigma_f^-1/sigma_f^2)

    whose invertibility is sufficient for s_beta to be invertible; the first
    environment passing the test is reported (None if none does).
    """
    agg = _aggregates(envs)
    cond = s_beta_condition(agg, _s_beta(agg))
    solvable = np.isfinite(cond) and cond < 1.0 / tol
    inv_sum_norm = float(np.linalg.norm(agg.inv_sum, 2))
    witness = None
    for e, inv in enumerate(agg.inverses):
        candidate = inv - agg.inv_sum / agg.weight
        scale = float(np.linalg.norm(inv, 2)) + inv_sum_norm / agg.weight
        if _scaled_cond(candidate, scale) < 1.0 / tol:
            witness = e
            break
    return SolvabilityReport(solvable=bool(solvable), cond=cond, witness=witness)


@dataclass(eq=False)
class KlFit:
    """Fitted invariant coefficient with diagnostics.

    cov is the conditional covariance of the estimator (present when sample
    counts were available and the variance was requested); variance_kind
    records whether the residual variances entering it were supplied as known
    or plugged in from the moments.
    """

    beta: np.ndarray
    eta: np.ndarray
    s_beta: np.ndarray
    cond_s_beta: float
    cov: np.ndarray | None
    loss_at_opt: float
    stationarity_residual: float = float("nan")
    variance_kind: str | None = None
    lam: float | None = None
    kkt_residual: float | None = None
    n_iter: int | None = None

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "eta": self.eta.tolist(),
            "s_beta": self.s_beta.tolist(),
            "cond_s_beta": self.cond_s_beta,
            "cov": None if self.cov is None else self.cov.tolist(),
            "loss_at_opt": self.loss_at_opt,
            "stationarity_residual": self.stationarity_residual,
            "variance_kind": self.variance_kind,
            "lam": self.lam,
            "kkt_residual": self.kkt_residual,
            "n_iter": self.n_iter,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _stationarity_residual(agg, beta, eta):
    r1 = agg.sigma_sum @ beta - agg.sigma_coef_sum + agg.weight * eta
    r2 = agg.inv_sum @ eta - agg.coef_sum + agg.weight * beta
    scale = 1.0 + float(np.linalg.norm(agg.sigma_coef_sum)) + float(np.linalg.norm(agg.coef_sum))
    return float(np.hypot(np.linalg.norm(r1), np.linalg.norm(r2))) / scale


def _w_path_cov(agg, s_beta):
    """General variance assembly sum_e (1/n_e) W_e sigma_e^-1 W_e'.

    W_e = s_beta^-1 (inv_sum sigma_e - weight I) / sigma_e are the blocks of
    the linear map sending per-environment coefficients to the estimate;
    valid for any mix of sample counts.
    """
    d = s_beta.shape[0]
    eye = np.eye(d)
    cov = np.zeros((d, d))
    for sigma, inv, s2, n_e in zip(agg.sigmas, agg.inverses, agg.resid_vars, agg.ns):
        w_e = np.linalg.solve(s_beta, agg.inv_sum @ sigma - agg.weight * eye) / np.sqrt(s2)
        cov += (w_e @ inv @ w_e.T) / float(n_e)
    return symmetrize(cov)


def _conditional_cov(agg, s_beta):
    """Conditional covariance of the estimator for fixed covariates.

    Equal sample counts use the short form (1/n) s_beta^-1 inv_sum, which
    the general assembly reduces to; unequal counts take the general path.
    """
    if np.any(agg.ns < 1):
        raise ValueError(
            "conditional variance needs per-environment sample counts; "
            "population-exact moments (n=0) have none"
        )
    if np.all(agg.ns == agg.ns[0]):
        n = float(agg.ns[0])
        return symmetrize(np.linalg.solve(s_beta, agg.inv_sum) / n)
    return _w_path_cov(agg, s_beta)


def fit_kl(envs, with_variance=False, resid_vars=None) -> KlFit:
    """Closed-form joint minimizer of the reparametrized loss.

    Solves the two stationarity equations

        (sum sigma_e/s2) beta = (sum sigma_e beta_e/s2) - (sum 1/s2) eta
        (sum sigma_e^-1/s2) eta = (sum beta_e/s2) - (sum 1/s2) beta

    via the scaling matrix s_beta. Needs at least two environments, and
    raises IllPosedError when s_beta has condition number above 1e12 (the
    estimator variance blows up; more diverse environments fix it).

    resid_vars optionally supplies known residual variances used everywhere
    in place of the plug-in ones. with_variance additionally returns the
    conditional covariance of the estimator for fixed covariates, which
    requires every environment to carry a sample count.
    """
    if len(envs) < 2:
        raise ValueError("the closed-form fit needs at least two environments")
    agg = _aggregates(envs, resid_vars)
    s_beta = _s_beta(agg)
    cond = s_beta_condition(agg, s_beta)
    if not np.isfinite(cond) or cond > COND_THRESHOLD:
        raise IllPosedError(
            f"s_beta condition number {cond:.3e} exceeds {COND_THRESHOLD:.0e}; "
            "the environments are not diverse enough to identify the "
            "coefficient (identical environments are the extreme case)",
            cond=cond,
        )
    rhs = agg.inv_sum @ agg.sigma_coef_sum - agg.weight * agg.coef_sum
    beta = np.linalg.solve(s_beta, rhs)
    eta = spd_solve(agg.inv_sum, agg.coef_sum - agg.weight * beta)
    cov = None
    kind = None
    if with_variance:
        cov = _conditional_cov(agg, s_beta)
        kind = "known" if resid_vars is not None else "plugin"
    return KlFit(
        beta=beta,
        eta=eta,
        s_beta=s_beta,
        cond_s_beta=cond,
        cov=cov,
        loss_at_opt=kl_loss(envs, beta, eta, resid_vars=resid_vars),
        stationarity_residual=_stationarity_residual(agg, beta, eta),
        variance_kind=kind,
    )


def minimize_kl_loss(envs, grad_tol=1e-10, max_iter=500_000):
    """Reference minimizer: steepest descent with exact line search.

    Starts from the origin in (beta, eta) and iterates until the joint
    gradient norm drops below grad_tol. Exists as an independent check of the
    closed form; use fit_kl for real work.
    """
    agg = _aggregates(envs)
    d = agg.sigma_sum.shape[0]
    beta = np.zeros(d)
    eta = np.zeros(d)
    for _ in range(max_iter):
        gb = agg.sigma_sum @ beta - agg.sigma_coef_sum + agg.weight * eta
        ge = agg.inv_sum @ eta - agg.coef_sum + agg.weight * beta
        sq = float(gb @ gb + ge @ ge)
        if np.sqrt(sq) <= grad_tol:
            break
        # exact line search for a quadratic: step = g'g / g'Hg
        hb = agg.sigma_sum @ gb + agg.weight * ge
        he = agg.inv_sum @ ge + agg.weight * gb
        curvature = float(gb @ hb + ge @ he)
        if curvature <= 0:
            raise ArithmeticError("loss curvature is not positive along the gradient")
        step = sq / curvature
        beta -= step * gb
        eta -= step * ge
    return beta, eta


def robustness_constant(envs) -> float:
    """Misspecification sensitivity constant of the closed-form estimator.

        C = (sum 1/s2) (||sum sigma_e^-1/s2|| + sum ||sigma_e^-1||/s2)

    in spectral norm; computable from data. If each environment's
    confounding direction deviates from a common one by at most delta in
    norm, the scaled estimation error obeys
    || s_beta (beta_fit - beta_true) || <= C * delta.
    """
    agg = _aggregates(envs)
    inv_norms = sum(
        float(np.linalg.norm(inv, 2)) / s2 for inv, s2 in zip(agg.inverses, agg.resid_vars)
    )
    return agg.weight * (float(np.linalg.norm(agg.inv_sum, 2)) + inv_norms)


def robustness_bound(envs, delta_sup) -> float:
    """Bound on the squared scaled estimation error under misspecification.

        || s_beta (beta_fit - beta_true) ||^2 <= (C * delta_sup)^2

    with C = robustness_constant(envs); squaring the error squares the
    constant as well. Zero exactly when delta_sup is zero.
    """
    if delta_sup < 0:
        raise ValueError("delta_sup must be nonnegative")
    return (robustness_constant(envs) * float(delta_sup)) ** 2
