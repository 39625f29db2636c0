"""Linear structural-equation models with latent confounders.

A model couples D observed covariates, one response and Q latent variables
through fixed connectivity matrices. Environments share every structural
parameter and differ only through the noise covariances of the observed
variables, which realizes additive shift interventions: per-environment
population moments stay analytically available, and the cross-covariance
decomposes into an invariant coefficient plus a confounding direction that
is itself environment-invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .linalg import (
    as_square,
    as_vector,
    cholesky_spd,
    cond_2,
    random_spd,
    symmetrize,
)

GAUSSIAN = "gaussian"
STUDENT_T = "student_t"

PERTURB_BXX = "b_xx"
PERTURB_BXH = "b_xh"
PERTURB_SIGMA_H = "sigma_h"
_PERTURB_TARGETS = (PERTURB_BXX, PERTURB_BXH, PERTURB_SIGMA_H)

# rcond below this counts as singular when checking (I - b_xx)
_SINGULAR_RCOND = 1e-12


def derive_rng(seed, *path) -> np.random.Generator:
    """Deterministic generator from an integer (or sequence) seed plus a path.

    Appending path components gives disjoint streams for parallel work.
    """
    if isinstance(seed, np.random.Generator):
        if path:
            raise ValueError("cannot derive a sub-stream from a Generator; pass an int seed")
        return seed
    entropy = list(seed) if isinstance(seed, (list, tuple)) else [int(seed)]
    return np.random.default_rng(entropy + [int(p) for p in path])


@dataclass(frozen=True, eq=False)
class SemModel:
    """Structural parameters shared by every environment.

    b_xx:       D x D covariate connectivity; (I - b_xx) must be invertible.
    b_xh:       D x Q latent-to-covariate connectivity.
    beta_star:  length-D invariant covariate-to-response coefficient.
    eta0:       length-Q latent-to-response coefficient.
    sigma_h:    Q x Q latent noise covariance, symmetric positive definite.
    """

    b_xx: np.ndarray
    b_xh: np.ndarray
    beta_star: np.ndarray
    eta0: np.ndarray
    sigma_h: np.ndarray

    def __post_init__(self):
        b_xx = as_square(self.b_xx, name="b_xx")
        d = b_xx.shape[0]
        b_xh = np.asarray(self.b_xh, dtype=float)
        if b_xh.ndim != 2 or b_xh.shape[0] != d:
            raise ValueError(f"b_xh must be {d}xQ, got shape {b_xh.shape}")
        q = b_xh.shape[1]
        object.__setattr__(self, "b_xx", b_xx)
        object.__setattr__(self, "b_xh", b_xh)
        object.__setattr__(self, "beta_star", as_vector(self.beta_star, d, "beta_star"))
        object.__setattr__(self, "eta0", as_vector(self.eta0, q, "eta0"))
        sigma_h = as_square(self.sigma_h, q, "sigma_h")
        cholesky_spd(sigma_h, name="sigma_h")
        object.__setattr__(self, "sigma_h", sigma_h)
        if _is_singular(np.eye(d) - b_xx):
            raise ValueError("(I - b_xx) is singular; the model has no solution")

    @property
    def d(self) -> int:
        return self.b_xx.shape[0]

    @property
    def q(self) -> int:
        return self.b_xh.shape[1]

    def to_dict(self) -> dict:
        return {
            "b_xx": self.b_xx.tolist(),
            "b_xh": self.b_xh.tolist(),
            "beta_star": self.beta_star.tolist(),
            "eta0": self.eta0.tolist(),
            "sigma_h": self.sigma_h.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SemModel":
        return cls(
            b_xx=np.asarray(payload["b_xx"], dtype=float),
            b_xh=np.asarray(payload["b_xh"], dtype=float),
            beta_star=np.asarray(payload["beta_star"], dtype=float),
            eta0=np.asarray(payload["eta0"], dtype=float),
            sigma_h=np.asarray(payload["sigma_h"], dtype=float),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SemModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class EnvironmentNoiseSpec:
    """Environment-specific noise covariances (the only parameters that vary).

    sigma_ex:   D x D covariate noise covariance, symmetric positive definite.
    sigma_ey:   response noise variance, positive scalar.
    noise_kind: "gaussian" or "student_t"; Student draws need df > 2 so the
                target covariance exists.
    """

    sigma_ex: np.ndarray
    sigma_ey: float
    noise_kind: str = GAUSSIAN
    df: float | None = None

    def __post_init__(self):
        sigma_ex = as_square(self.sigma_ex, name="sigma_ex")
        cholesky_spd(sigma_ex, name="sigma_ex")
        object.__setattr__(self, "sigma_ex", sigma_ex)
        object.__setattr__(self, "sigma_ey", float(self.sigma_ey))
        if self.sigma_ey <= 0:
            raise ValueError("sigma_ey must be positive")
        if self.noise_kind not in (GAUSSIAN, STUDENT_T):
            raise ValueError(f"unknown noise_kind {self.noise_kind!r}")
        if self.noise_kind == STUDENT_T:
            if self.df is None or self.df <= 2:
                raise ValueError("student_t noise requires df > 2")
            object.__setattr__(self, "df", float(self.df))

    @property
    def d(self) -> int:
        return self.sigma_ex.shape[0]

    def to_dict(self) -> dict:
        return {
            "sigma_ex": self.sigma_ex.tolist(),
            "sigma_ey": self.sigma_ey,
            "noise_kind": self.noise_kind,
            "df": self.df,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "EnvironmentNoiseSpec":
        return cls(
            sigma_ex=np.asarray(payload["sigma_ex"], dtype=float),
            sigma_ey=float(payload["sigma_ey"]),
            noise_kind=payload.get("noise_kind", GAUSSIAN),
            df=payload.get("df"),
        )


@dataclass(eq=False)
class EnvironmentData:
    """Raw samples from one environment."""

    x: np.ndarray
    y: np.ndarray
    env_id: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2:
            raise ValueError(f"x must be 2-dimensional, got shape {self.x.shape}")
        if self.y.ndim != 1 or self.y.shape[0] != self.x.shape[0]:
            raise ValueError("y must be a vector with one entry per row of x")
        if self.x.shape[0] < 1:
            raise ValueError("an environment needs at least one sample")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


class PopulationMoments(NamedTuple):
    sigma_x: np.ndarray
    sigma_xy: np.ndarray
    sigma_y: float
    eta_star: np.ndarray


def _is_singular(a) -> bool:
    c = cond_2(a)
    return (not np.isfinite(c)) or (1.0 / c) < _SINGULAR_RCOND


def population_moments(model: SemModel, noise: EnvironmentNoiseSpec) -> PopulationMoments:
    """Exact second moments of (X, Y) in the environment given by `noise`.

    With C = (I - b_xx)^-1:

        sigma_x  = C (sigma_ex + b_xh sigma_h b_xh^T) C^T
        eta_star = C b_xh sigma_h eta0
        sigma_xy = sigma_x beta_star + eta_star

    and sigma_y follows from the same full-system covariance. eta_star does
    not depend on the environment; that invariance is what the estimator
    exploits.
    """
    d = model.d
    if noise.d != d:
        raise ValueError(f"noise is {noise.d}-dimensional but the model has d={d}")
    eye = np.eye(d)
    c = np.linalg.solve(eye - model.b_xx, eye)
    bh_sh = model.b_xh @ model.sigma_h  # D x Q
    sigma_x = symmetrize(c @ (noise.sigma_ex + bh_sh @ model.b_xh.T) @ c.T)
    eta_star = c @ (bh_sh @ model.eta0)
    sigma_xy = sigma_x @ model.beta_star + eta_star
    sigma_y = float(
        model.beta_star @ sigma_x @ model.beta_star
        + 2.0 * model.beta_star @ eta_star
        + model.eta0 @ model.sigma_h @ model.eta0
        + noise.sigma_ey
    )
    return PopulationMoments(sigma_x, sigma_xy, sigma_y, eta_star)


def _noise_draws(rng, n, chol, kind, df):
    """n centered draws with covariance chol @ chol.T.

    Student draws use iid t entries rescaled by sqrt((df-2)/df) so their
    second moments match the requested covariance exactly.
    """
    dim = chol.shape[0]
    if kind == GAUSSIAN:
        z = rng.standard_normal((n, dim))
    else:
        z = rng.standard_t(df, size=(n, dim)) * np.sqrt((df - 2.0) / df)
    return z @ chol.T


def sample_environment(
    model: SemModel,
    noise: EnvironmentNoiseSpec,
    n: int,
    seed,
    env_id: str = "",
) -> EnvironmentData:
    """Draw n joint samples by solving the structural system.

    The latent noise is always Gaussian; covariate and response noise follow
    `noise.noise_kind`. Deterministic given the seed: draws are consumed in
    the fixed order (covariate noise, response noise, latent noise).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    d, q = model.d, model.q
    if noise.d != d:
        raise ValueError(f"noise is {noise.d}-dimensional but the model has d={d}")
    rng = derive_rng(seed)

    eps = np.empty((n, d + 1 + q))
    chol_x = cholesky_spd(noise.sigma_ex, name="sigma_ex")
    eps[:, :d] = _noise_draws(rng, n, chol_x, noise.noise_kind, noise.df)
    chol_y = np.array([[np.sqrt(noise.sigma_ey)]])
    eps[:, d] = _noise_draws(rng, n, chol_y, noise.noise_kind, noise.df)[:, 0]
    chol_h = cholesky_spd(model.sigma_h, name="sigma_h")
    eps[:, d + 1 :] = _noise_draws(rng, n, chol_h, GAUSSIAN, None)

    # full system (X, Y, H) = B (X, Y, H) + eps
    full_b = np.zeros((d + 1 + q, d + 1 + q))
    full_b[:d, :d] = model.b_xx
    full_b[:d, d + 1 :] = model.b_xh
    full_b[d, :d] = model.beta_star
    full_b[d, d + 1 :] = model.eta0
    z = np.linalg.solve(np.eye(d + 1 + q) - full_b, eps.T).T
    return EnvironmentData(x=z[:, :d], y=z[:, d], env_id=env_id)


def generate_baseline_model(d, q, d0, seed, connect_prob=0.3) -> SemModel:
    """Random model in the baseline configuration.

    beta_star has its first d0 entries equal to 1 and the rest 0, eta0 is
    all 0.5, and the latent covariance is the identity. Connectivity entries
    are Bernoulli(connect_prob) * Uniform[-1, 1]; b_xx is kept strictly
    lower triangular, which makes (I - b_xx) invertible for any entry values
    and corresponds to an acyclic covariate graph.
    """
    if not 0 <= d0 <= d:
        raise ValueError(f"d0 must lie in [0, {d}], got {d0}")
    if d < 1 or q < 1:
        raise ValueError("d and q must be at least 1")
    rng = derive_rng(seed)
    # b_xx is drawn before b_xh so the covariate graph is reproducible
    # across latent dimensions for a fixed seed
    b_xx = _connectivity(rng, d, d, connect_prob)
    b_xx = np.tril(b_xx, k=-1)
    b_xh = _connectivity(rng, d, q, connect_prob)
    beta_star = np.zeros(d)
    beta_star[:d0] = 1.0
    return SemModel(
        b_xx=b_xx,
        b_xh=b_xh,
        beta_star=beta_star,
        eta0=np.full(q, 0.5),
        sigma_h=np.eye(q),
    )


def _connectivity(rng, rows, cols, prob):
    mask = rng.random((rows, cols)) < prob
    weights = rng.uniform(-1.0, 1.0, size=(rows, cols))
    return mask * weights


def generate_environment_noise(
    d,
    e_index,
    diversity_t,
    shared_base,
    seed,
    noise_kind=GAUSSIAN,
    df=None,
) -> EnvironmentNoiseSpec:
    """Noise spec for environment `e_index` at diversity level `diversity_t`.

    The covariate noise covariance interpolates between a shared base and a
    fresh per-environment random SPD draw:

        sigma_ex = (1 - t) * shared_base + t * sigma_e

    so t=0 gives identical environments and t=1 fully independent ones. The
    response noise variance is 1 + |Z| with Z standard normal. All draws
    derive from (seed, e_index), so a fixed seed yields one consistent family
    of environments regardless of the interpolation level.
    """
    if not 0.0 <= diversity_t <= 1.0:
        raise ValueError("diversity_t must lie in [0, 1]")
    shared_base = as_square(shared_base, d, "shared_base")
    cholesky_spd(shared_base, name="shared_base")
    rng = derive_rng(seed, e_index)
    sigma_e = random_spd(d, rng)
    sigma_ex = (1.0 - diversity_t) * shared_base + diversity_t * sigma_e
    sigma_ey = 1.0 + abs(rng.standard_normal())
    return EnvironmentNoiseSpec(
        sigma_ex=sigma_ex, sigma_ey=sigma_ey, noise_kind=noise_kind, df=df
    )


def perturb_model(model: SemModel, target, scale, seed, max_retries=10) -> SemModel:
    """Additive Gaussian perturbation of one structural parameter.

    Used to generate misspecified environments: each call draws its own
    perturbation, so per-environment seeds give per-environment deviations
    around a shared base model. scale=0 returns the model unchanged. The
    latent covariance perturbation is symmetrized and eigenvalue-clamped at
    1e-6 so it stays a valid covariance at any scale.
    """
    if target not in _PERTURB_TARGETS:
        raise ValueError(f"target must be one of {_PERTURB_TARGETS}, got {target!r}")
    if scale < 0:
        raise ValueError("scale must be nonnegative")
    if scale == 0:
        return model
    rng = derive_rng(seed)
    if target == PERTURB_BXH:
        draw = rng.standard_normal((model.d, model.q))
        return replace(model, b_xh=model.b_xh + scale * draw)
    if target == PERTURB_SIGMA_H:
        draw = rng.standard_normal((model.q, model.q))
        sym = symmetrize(model.sigma_h + scale * draw)
        eigvals, eigvecs = np.linalg.eigh(sym)
        clamped = np.clip(eigvals, 1e-6, None)
        return replace(model, sigma_h=symmetrize((eigvecs * clamped) @ eigvecs.T))
    eye = np.eye(model.d)
    for _ in range(max_retries):
        candidate = model.b_xx + scale * rng.standard_normal((model.d, model.d))
        if not _is_singular(eye - candidate):
            return replace(model, b_xx=candidate)
    raise ValueError(
        f"perturbation of b_xx at scale {scale} left (I - b_xx) singular "
        f"after {max_retries} retries"
    )
