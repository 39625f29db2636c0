"""Per-environment second-moment estimation.

Everything downstream consumes an environment only through the triplet
(covariate covariance, regression coefficient, residual variance), which is
an exact reparametrization of the joint covariance of (X, y). Moments can
come from data (mean-centered, 1/n-normalized) or directly from population
covariances, in which case n is recorded as 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import SingularCovarianceError
from .linalg import as_vector, check_symmetric, cond_2, spd_solve, symmetrize
from .sem import EnvironmentData

COND_THRESHOLD = 1e12


@dataclass(eq=False)
class EnvironmentMoments:
    """Second-moment triplet of one environment.

    beta_e solves sigma_x @ beta_e = sigma_xy and resid_var is the residual
    variance sigma_y - beta_e' sigma_x beta_e; both are derived quantities,
    kept alongside the raw blocks because the estimator consumes them
    directly. n = 0 marks population-exact moments.
    """

    sigma_x: np.ndarray
    sigma_xy: np.ndarray
    sigma_y: float
    beta_e: np.ndarray
    resid_var: float
    n: int = 0
    env_id: str = ""
    cond: float = float("nan")

    @property
    def d(self) -> int:
        return self.sigma_x.shape[0]

    def to_dict(self) -> dict:
        return {
            "sigma_x": self.sigma_x.tolist(),
            "sigma_xy": self.sigma_xy.tolist(),
            "sigma_y": self.sigma_y,
            "beta_e": self.beta_e.tolist(),
            "resid_var": self.resid_var,
            "n": self.n,
            "env_id": self.env_id,
            "cond": self.cond,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EnvironmentMoments":
        return cls(
            sigma_x=np.asarray(payload["sigma_x"], dtype=float),
            sigma_xy=np.asarray(payload["sigma_xy"], dtype=float),
            sigma_y=float(payload["sigma_y"]),
            beta_e=np.asarray(payload["beta_e"], dtype=float),
            resid_var=float(payload["resid_var"]),
            n=int(payload.get("n", 0)),
            env_id=payload.get("env_id", ""),
            cond=float(payload.get("cond", float("nan"))),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "EnvironmentMoments":
        return cls.from_dict(json.loads(text))


def moments_from_covariance(sigma_x, sigma_xy, sigma_y, n=0, env_id="") -> EnvironmentMoments:
    """Build the triplet from covariance blocks (population or empirical)."""
    label = env_id or "environment"
    sigma_x = check_symmetric(np.atleast_2d(np.asarray(sigma_x, dtype=float)), name=f"{label} sigma_x")
    d = sigma_x.shape[0]
    sigma_xy = as_vector(sigma_xy, d, f"{label} sigma_xy")
    sigma_y = float(sigma_y)
    cond = cond_2(sigma_x)
    if cond > COND_THRESHOLD:
        raise SingularCovarianceError(
            f"covariate covariance of {label} is singular or near-singular "
            f"(condition number {cond:.3e})"
        )
    try:
        beta_e = spd_solve(sigma_x, sigma_xy, name=f"{label} sigma_x")
    except ValueError as exc:
        raise SingularCovarianceError(f"{label}: {exc}") from None
    resid_var = sigma_y - float(beta_e @ sigma_x @ beta_e)
    if resid_var <= 0:
        raise SingularCovarianceError(
            f"{label} has nonpositive residual variance ({resid_var:.3e}); "
            "the response is degenerate given the covariates"
        )
    return EnvironmentMoments(
        sigma_x=sigma_x,
        sigma_xy=sigma_xy,
        sigma_y=sigma_y,
        beta_e=beta_e,
        resid_var=resid_var,
        n=int(n),
        env_id=env_id,
        cond=cond,
    )


def moments_from_triplet(sigma_x, beta_e, resid_var, n=0, env_id="") -> EnvironmentMoments:
    """Build moments directly from the (sigma_x, beta_e, resid_var) triplet."""
    sigma_x = np.atleast_2d(np.asarray(sigma_x, dtype=float))
    beta_e = as_vector(beta_e, sigma_x.shape[0], "beta_e")
    resid_var = float(resid_var)
    sigma_xy = sigma_x @ beta_e
    sigma_y = resid_var + float(beta_e @ sigma_xy)
    return moments_from_covariance(sigma_x, sigma_xy, sigma_y, n=n, env_id=env_id)


def estimate_moments(data: EnvironmentData, jitter=0.0) -> EnvironmentMoments:
    """Empirical moment triplet of one environment.

    Covariances are mean-centered and 1/n-normalized (the maximum-likelihood
    convention). Requires n > D, and the covariate covariance must be
    invertible: condition numbers beyond 1e12 raise SingularCovarianceError
    naming the environment. `jitter` optionally adds tau * I to the covariate
    covariance before inversion; it is off by default so estimates stay
    unbiased transforms of the raw second moments.
    """
    label = data.env_id or "environment"
    n, d = data.n, data.d
    if n <= d:
        raise SingularCovarianceError(
            f"{label} has n={n} <= D={d} samples; the covariate covariance is singular"
        )
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    xc = data.x - data.x.mean(axis=0)
    yc = data.y - data.y.mean()
    sigma_x = symmetrize((xc.T @ xc) / n)
    if jitter:
        sigma_x = sigma_x + jitter * np.eye(d)
    sigma_xy = (xc.T @ yc) / n
    sigma_y = float(yc @ yc) / n
    return moments_from_covariance(sigma_x, sigma_xy, sigma_y, n=n, env_id=data.env_id)


def joint_covariance(m: EnvironmentMoments) -> np.ndarray:
    """Reassemble the (D+1) x (D+1) joint covariance from the triplet."""
    d = m.d
    out = np.empty((d + 1, d + 1))
    out[:d, :d] = m.sigma_x
    cross = m.sigma_x @ m.beta_e
    out[:d, d] = cross
    out[d, :d] = cross
    out[d, d] = m.resid_var + float(m.beta_e @ cross)
    return out
