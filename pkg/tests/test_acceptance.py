"""Acceptance criteria, one test per criterion.

Each test prints one PASS/FAIL line (visible with `pytest -s` or in failure
output) and enforces the stated tolerance and, where stated, the runtime
budget. Criterion 14 is known to sit below its threshold under the pinned
data-generating process; it is asserted as stated rather than weakened.
"""

import time

import numpy as np
import pytest

from conftest import make_consistent_envs
from klreg.core import (
    fit_kl,
    gaussian_kl,
    gaussian_kl_triplet,
    minimize_kl_loss,
    pi_map,
    pooled_theta,
    robustness_bound,
    robustness_constant,
    s_beta_solvable,
)
from klreg.errors import IllPosedError
from klreg.harness import desk_config, rank_edges, run_experiment
from klreg.lasso import LassoConfig, fit_lasso, lambda_max
from klreg.linalg import random_spd
from klreg.metrics import aupr
from klreg.moments import (
    estimate_moments,
    moments_from_covariance,
    moments_from_triplet,
)
from klreg.sem import (
    generate_baseline_model,
    generate_environment_noise,
    population_moments,
    sample_environment,
)
from test_lasso import enumerate_lasso_optimum


def report(number, detail):
    print(f"PASS criterion {number}: {detail}")


def population_environments(model, n_envs, seed):
    envs = []
    for e in range(n_envs):
        noise = generate_environment_noise(model.d, e, 1.0, np.eye(model.d), seed)
        pm = population_moments(model, noise)
        envs.append(moments_from_covariance(pm.sigma_x, pm.sigma_xy, pm.sigma_y, env_id=f"e{e}"))
    return envs


def test_criterion_01_exact_population_recovery():
    start = time.perf_counter()
    dims = [2, 5, 10, 20]
    latents = [1, 2, 4]
    env_counts = [2, 3, 5]
    worst_beta = worst_eta = 0.0
    for trial in range(50):
        d = dims[trial % 4]
        q = latents[trial % 3]
        n_envs = env_counts[trial % 3]
        model = generate_baseline_model(d, q, min(d, 3 + trial % 5), seed=(1, trial))
        envs = population_environments(model, n_envs, seed=(1, trial, 77))
        fit = fit_kl(envs)
        eta_star = envs[0].sigma_xy - envs[0].sigma_x @ model.beta_star
        worst_beta = max(worst_beta, float(np.abs(fit.beta - model.beta_star).max()))
        worst_eta = max(worst_eta, float(np.abs(fit.eta - eta_star).max()))
    elapsed = time.perf_counter() - start
    assert worst_beta <= 1e-8
    assert worst_eta <= 1e-8
    assert elapsed < 10.0
    report(1, f"max |beta err| {worst_beta:.2e}, max |eta err| {worst_eta:.2e}, {elapsed:.1f}s")


def test_criterion_02_closed_form_equals_optimizer():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 9))
        envs, _, _ = make_consistent_envs(d, int(rng.integers(2, 6)), rng)
        fit = fit_kl(envs)
        gd_beta, gd_eta = minimize_kl_loss(envs, grad_tol=1e-10)
        gap = np.hypot(np.linalg.norm(fit.beta - gd_beta), np.linalg.norm(fit.eta - gd_eta))
        worst = max(worst, float(gap))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-6
    assert elapsed < 30.0
    report(2, f"max L2 gap {worst:.2e} over 50 problems, {elapsed:.1f}s")


def test_criterion_03_hand_checkable_scalar_case():
    envs = [
        moments_from_triplet([[2.0]], [1.5], 1.0, n=100, env_id="e1"),
        moments_from_triplet([[1.0]], [2.0], 1.0, n=100, env_id="e2"),
    ]
    fit = fit_kl(envs, with_variance=True)
    checks = {
        "beta": abs(fit.beta[0] - 1.0),
        "eta": abs(fit.eta[0] - 1.0),
        "s_beta": abs(fit.s_beta[0, 0] - 0.5),
        "V(n=100)": abs(fit.cov[0, 0] - 0.03),
        "C_robust": abs(robustness_constant(envs) - 6.0),
        "pooled": abs(pooled_theta(envs)[0] - 5.0 / 3.0),
    }
    worst = max(checks.values())
    assert worst <= 1e-12, checks
    report(3, f"all six hand values exact, max deviation {worst:.2e}")


def test_criterion_04_gaussian_kl_lemma():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 6))
        s1, s2 = random_spd(d, rng), random_spd(d, rng)
        b1, b2 = rng.standard_normal(d), rng.standard_normal(d)
        v1, v2 = float(rng.uniform(0.3, 2.5)), float(rng.uniform(0.3, 2.5))
        triplet = gaussian_kl_triplet((s1, b1, v1), (s2, b2, v2))
        direct = gaussian_kl(pi_map(s1, v1, b1), pi_map(s2, v2, b2))
        worst = max(worst, abs(triplet - direct))
        assert triplet >= 0.0
    sigma = random_spd(3, rng)
    same = gaussian_kl_triplet((sigma, np.ones(3), 1.1), (sigma, np.ones(3), 1.1))
    apart = gaussian_kl_triplet((sigma, np.ones(3), 1.1), (sigma, np.zeros(3), 1.1))
    assert worst <= 1e-9
    assert same <= 1e-12
    assert apart > 1e-6
    report(4, f"max |triplet - joint| {worst:.2e} over 100 triplets; zero iff equal")


def test_criterion_05_variance_formula():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    d, n_envs, n, redraws = 4, 3, 300, 500
    beta_envs = [rng.standard_normal(d) for _ in range(n_envs)]
    sigmas2 = [1.0, 0.6, 1.8]
    xs = [
        rng.standard_normal((n, d)) @ np.linalg.cholesky(random_spd(d, rng)).T
        for _ in range(n_envs)
    ]
    predicted = None
    fits = []
    for trial in range(redraws):
        moms = []
        for e in range(n_envs):
            y = xs[e] @ beta_envs[e] + np.sqrt(sigmas2[e]) * rng.standard_normal(n)
            xc = xs[e] - xs[e].mean(axis=0)
            yc = y - y.mean()
            moms.append(
                moments_from_covariance((xc.T @ xc) / n, (xc.T @ yc) / n, float(yc @ yc) / n, n=n)
            )
        fit = fit_kl(moms, with_variance=(trial == 0), resid_vars=sigmas2)
        if trial == 0:
            predicted = fit.cov
        fits.append(fit.beta)
    empirical = np.cov(np.array(fits).T, bias=False)
    rel = float(np.linalg.norm(empirical - predicted) / np.linalg.norm(predicted))
    elapsed = time.perf_counter() - start
    assert rel <= 0.15
    assert elapsed < 60.0
    report(5, f"relative Frobenius error {rel:.3f} over {redraws} redraws, {elapsed:.1f}s")


def test_criterion_06_robustness_bound():
    rng = np.random.default_rng(6)
    held = 0
    trials = 0
    while trials < 100:
        d = int(rng.integers(2, 5))
        n_envs = int(rng.integers(2, 5))
        beta_star = rng.standard_normal(d)
        eta_star = rng.standard_normal(d)
        delta_sup = float(rng.uniform(0.1, 2.0))
        envs = []
        for e in range(n_envs):
            sigma = random_spd(d, rng)
            delta = rng.standard_normal(d)
            delta *= rng.uniform(0, delta_sup) / max(np.linalg.norm(delta), 1e-12)
            beta_e = beta_star + np.linalg.solve(sigma, eta_star + delta)
            envs.append(moments_from_triplet(sigma, beta_e, float(rng.uniform(0.5, 2.0))))
        try:
            fit = fit_kl(envs)
        except IllPosedError:
            continue
        trials += 1
        lhs = float(np.linalg.norm(fit.s_beta @ (fit.beta - beta_star)) ** 2)
        if lhs <= robustness_bound(envs, delta_sup) * (1 + 1e-9):
            held += 1
    assert held == 100
    report(6, f"bound held in {held}/100 constructed-perturbation trials")


def test_criterion_07_lasso_consistency():
    rng = np.random.default_rng(7)
    worst_zero = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 9))
        envs, _, _ = make_consistent_envs(d, int(rng.integers(2, 6)), rng)
        closed = fit_kl(envs)
        fit = fit_lasso(envs, LassoConfig(lam=0.0))
        worst_zero = max(
            worst_zero,
            float(np.abs(fit.beta - closed.beta).max()),
            float(np.abs(fit.eta - closed.eta).max()),
        )
    assert worst_zero <= 1e-6

    envs, _, _ = make_consistent_envs(5, 3, rng)
    lmax = lambda_max(envs)
    for factor in (1.0, 1.3, 5.0):
        at_anchor = fit_lasso(envs, LassoConfig(lam=factor * lmax))
        assert np.all(at_anchor.beta == 0.0)

    worst_oracle = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        envs, _, _ = make_consistent_envs(d, int(rng.integers(2, 5)), rng)
        lam = float(rng.uniform(0.05, 0.8)) * lambda_max(envs)
        fit = fit_lasso(envs, LassoConfig(lam=lam))
        oracle_beta, oracle_eta = enumerate_lasso_optimum(envs, lam)
        worst_oracle = max(
            worst_oracle,
            float(np.abs(fit.beta - oracle_beta).max()),
            float(np.abs(fit.eta - oracle_eta).max()),
        )
    assert worst_oracle <= 1e-6
    report(
        7,
        f"lam=0 gap {worst_zero:.2e} (50 problems); anchor zeroes exactly; "
        f"sign-enumeration gap {worst_oracle:.2e} (20 problems)",
    )


def test_criterion_08_sample_size_trend():
    start = time.perf_counter()
    cfg = desk_config(
        "sample",
        sweep_values=(500, 5000),
        d0=10,
        q=2,
        e_count=4,
        estimators=("kl", "lasso_kl", "avg_ols", "zero"),
        seed=808,
    )
    rep = run_experiment(cfg)
    elapsed = time.perf_counter() - start
    assert not rep.failures
    kl_small = rep.median_mse(500.0, "kl")
    kl_big = rep.median_mse(5000.0, "kl")
    lasso_big = rep.median_mse(5000.0, "lasso_kl")
    avg_big = rep.median_mse(5000.0, "avg_ols")
    assert lasso_big <= kl_big < avg_big
    assert kl_big < kl_small / 3.0
    assert elapsed < 300.0
    report(
        8,
        f"n=5000 medians: lasso {lasso_big:.2e} <= kl {kl_big:.2e} < avg {avg_big:.2e}; "
        f"kl shrinks {kl_small / kl_big:.1f}x from n=500, {elapsed:.0f}s",
    )


def test_criterion_09_diversity_trend():
    rep = run_experiment(
        desk_config("diversity", sweep_values=(0.0, 1.0), estimators=("kl",), seed=909)
    )
    shared = rep.median_mse(0.0, "kl")
    diverse = rep.median_mse(1.0, "kl")
    assert diverse < shared
    report(9, f"median kl MSE {diverse:.2e} at t=1 < {shared:.2e} at t=0")


def test_criterion_10_confounding_trend():
    rep = run_experiment(
        desk_config(
            "confounding_scale",
            sweep_values=(0.0, 2.0),
            estimators=("kl", "avg_ols"),
            seed=1010,
        )
    )
    kl_strong = rep.median_mse(2.0, "kl")
    avg_strong = rep.median_mse(2.0, "avg_ols")
    assert kl_strong < avg_strong / 5.0
    # under no confounding every estimator does well
    assert rep.median_mse(0.0, "kl") < 0.01
    assert rep.median_mse(0.0, "avg_ols") < 0.01
    report(
        10,
        f"s=2: kl {kl_strong:.2e} < avg_ols/5 {avg_strong / 5:.2e}; s=0 both < 1e-2",
    )


def test_criterion_11_splitting_does_not_help():
    rep = run_experiment(
        desk_config("split", sweep_values=(1, 2), estimators=("kl",), seed=1111)
    )
    unsplit = rep.median_mse(1.0, "kl")
    split = rep.median_mse(2.0, "kl")
    assert split >= unsplit
    report(11, f"median kl MSE split {split:.2e} >= unsplit {unsplit:.2e}")


def test_criterion_12_student_t_robustness():
    rep = run_experiment(
        desk_config("student_t", sweep_values=(None, 5.0), estimators=("kl",), seed=1212)
    )
    assert not rep.failures
    gaussian = rep.median_mse(float("inf"), "kl")
    heavy = rep.median_mse(5.0, "kl")
    assert heavy <= 3.0 * gaussian
    report(12, f"median kl MSE t(5) {heavy:.2e} within 3x Gaussian {gaussian:.2e}")


def test_criterion_13_identical_environment_degeneracy():
    model = generate_baseline_model(6, 2, 3, seed=13)
    noise = generate_environment_noise(6, 0, 1.0, np.eye(6), seed=13)
    data = sample_environment(model, noise, 500, seed=13, env_id="only")
    copies = [estimate_moments(data) for _ in range(4)]
    solvability = s_beta_solvable(copies)
    assert not solvability.solvable
    assert solvability.cond > 1e12
    with pytest.raises(IllPosedError):
        fit_kl(copies)
    report(13, f"E copies of one environment: cond {solvability.cond:.2e} > 1e12 and ill-posed error")


def test_criterion_14_synthetic_grn_ranking():
    # ranking grid anchored below the confounding-dominated early path
    # (tuned on seeds 100-115, evaluated here on pre-registered seeds 0-9;
    # see the decisions ledger for the full measurement history)
    scores = []
    for seed in range(10):
        d, d0, n_targets = 20, 5, 3
        regulators = [f"g{j}" for j in range(d)]
        datasets, truth, lmaxes = {}, set(), []
        for t in range(n_targets):
            model = generate_baseline_model(d, 2, d0, (1400, seed, t))
            envs = []
            for e in range(4):
                noise = generate_environment_noise(d, e, 1.0, np.eye(d), (1400, seed, t, 1))
                envs.append(
                    sample_environment(model, noise, 5000, (1400, seed, t, 2, e), env_id=f"e{e}")
                )
            datasets[f"t{t}"] = envs
            lmaxes.append(lambda_max([estimate_moments(x) for x in envs]))
            truth |= {(regulators[j], f"t{t}") for j in range(d) if model.beta_star[j] != 0}
        grid = np.geomspace(0.05 * max(lmaxes), 1e-4 * max(lmaxes), 30)
        ranking = rank_edges(datasets, list(datasets), regulators, grid, truth=truth)
        scores.append(aupr(ranking))
    median = float(np.median(scores))
    print(f"criterion 14 measured: median AUPR {median:.3f} over 10 seeds {np.round(scores, 3)}")
    assert median >= 0.8, (
        f"median AUPR {median:.3f} < 0.8: path-entry scoring under this generator "
        "tops out near 0.8 (see decisions ledger for the blocking analysis)"
    )
    report(14, f"median AUPR {median:.3f} >= 0.8 over 10 seeds")
