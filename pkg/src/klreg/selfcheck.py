"""Built-in identity checks, runnable via the `check` CLI subcommand.

Each check exercises one exact identity the estimator relies on: the
hand-computable scalar case, agreement between the triplet and joint-matrix
KL formulas, population-level coefficient recovery, the moments round trip,
and agreement between the closed form and an iterative reference minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import fit_kl, gaussian_kl, gaussian_kl_triplet, minimize_kl_loss, pi_map, pooled_theta, robustness_constant
from .lasso import LassoConfig, fit_lasso, lambda_max
from .linalg import random_spd
from .moments import estimate_moments, joint_covariance, moments_from_covariance, moments_from_triplet
from .sem import derive_rng, generate_baseline_model, generate_environment_noise, population_moments, sample_environment


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _scalar_case():
    envs = [
        moments_from_triplet([[2.0]], [1.5], 1.0, n=100),
        moments_from_triplet([[1.0]], [2.0], 1.0, n=100),
    ]
    fit = fit_kl(envs, with_variance=True)
    checks = [
        abs(fit.beta[0] - 1.0),
        abs(fit.eta[0] - 1.0),
        abs(fit.s_beta[0, 0] - 0.5),
        abs(fit.cov[0, 0] - 0.03),
        abs(pooled_theta(envs)[0] - 5.0 / 3.0),
        abs(robustness_constant(envs) - 6.0),
    ]
    worst = max(checks)
    return worst <= 1e-12, f"max deviation {worst:.2e}"


def _kl_lemma(seed):
    rng = derive_rng(seed)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 6))
        t1 = (random_spd(d, rng), rng.standard_normal(d), float(rng.uniform(0.5, 2.0)))
        t2 = (random_spd(d, rng), rng.standard_normal(d), float(rng.uniform(0.5, 2.0)))
        direct = gaussian_kl(pi_map(t1[0], t1[2], t1[1]), pi_map(t2[0], t2[2], t2[1]))
        worst = max(worst, abs(gaussian_kl_triplet(t1, t2) - direct))
    return worst <= 1e-9, f"max |triplet - joint| {worst:.2e}"


def _population_recovery(seed):
    rng = derive_rng(seed)
    worst = 0.0
    for trial in range(5):
        d = int(rng.integers(2, 10))
        model = generate_baseline_model(d, 2, min(3, d), (seed, trial))
        envs = []
        for e in range(3):
            noise = generate_environment_noise(d, e, 1.0, np.eye(d), (seed, trial, 7))
            pm = population_moments(model, noise)
            envs.append(moments_from_covariance(pm.sigma_x, pm.sigma_xy, pm.sigma_y))
        fit = fit_kl(envs)
        worst = max(worst, float(np.abs(fit.beta - model.beta_star).max()))
    return worst <= 1e-8, f"max coefficient error {worst:.2e}"


def _moments_round_trip(seed):
    rng = derive_rng(seed)
    model = generate_baseline_model(5, 2, 3, seed)
    noise = generate_environment_noise(5, 0, 1.0, np.eye(5), seed)
    data = sample_environment(model, noise, 400, seed)
    m = estimate_moments(data)
    xy = np.column_stack([data.x, data.y])
    xy -= xy.mean(axis=0)
    raw = (xy.T @ xy) / data.n
    gap = float(np.abs(joint_covariance(m) - raw).max())
    return gap <= 1e-9, f"round-trip gap {gap:.2e}"


def _closed_form_vs_descent(seed):
    rng = derive_rng(seed)
    worst = 0.0
    for _ in range(5):
        d = int(rng.integers(2, 6))
        beta_star = rng.standard_normal(d)
        eta_star = rng.standard_normal(d)
        envs = []
        for e in range(3):
            sigma = random_spd(d, rng)
            beta_e = beta_star + np.linalg.solve(sigma, eta_star)
            envs.append(moments_from_triplet(sigma, beta_e, float(rng.uniform(0.5, 2.0))))
        fit = fit_kl(envs)
        gd_beta, gd_eta = minimize_kl_loss(envs)
        gap = np.hypot(np.linalg.norm(fit.beta - gd_beta), np.linalg.norm(fit.eta - gd_eta))
        worst = max(worst, float(gap))
    return worst <= 1e-6, f"max closed-form vs descent gap {worst:.2e}"


def _penalty_anchor():
    envs = [
        moments_from_triplet([[2.0]], [1.5], 1.0),
        moments_from_triplet([[1.0]], [2.0], 1.0),
    ]
    lmax = lambda_max(envs)
    fit = fit_lasso(envs, LassoConfig(lam=lmax))
    ok = fit.beta[0] == 0.0 and abs(fit.eta[0] - 7.0 / 3.0) <= 1e-12
    return ok, f"beta {float(fit.beta[0])}, eta deviation {abs(fit.eta[0] - 7.0 / 3.0):.2e}"


def run_all(seed=0) -> list[CheckResult]:
    checks = [
        ("scalar worked case", _scalar_case),
        ("gaussian KL lemma", lambda: _kl_lemma(seed)),
        ("population recovery", lambda: _population_recovery(seed)),
        ("moments round trip", lambda: _moments_round_trip(seed)),
        ("closed form vs gradient descent", lambda: _closed_form_vs_descent(seed)),
        ("penalty anchor zeroes the coefficient", _penalty_anchor),
    ]
    results = []
    for name, fn in checks:
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashed check is a failed check
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name=name, passed=passed, detail=detail))
    return results
