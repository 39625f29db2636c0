"""Baselines and evaluation metrics."""

import numpy as np
import pytest

from klreg.metrics import (
    EdgeRanking,
    aupr,
    average_ols,
    mse,
    ols_per_environment,
    pr_curve,
    support_metrics,
)
from klreg.moments import estimate_moments
from klreg.sem import (
    EnvironmentData,
    EnvironmentNoiseSpec,
    SemModel,
    sample_environment,
)


class TestOls:
    def test_matches_moment_coefficient_exactly(self):
        rng = np.random.default_rng(0)
        data = EnvironmentData(x=rng.standard_normal((200, 4)), y=rng.standard_normal(200))
        np.testing.assert_array_equal(ols_per_environment(data), estimate_moments(data).beta_e)

    def test_average_of_single_environment(self):
        rng = np.random.default_rng(1)
        data = EnvironmentData(x=rng.standard_normal((100, 3)), y=rng.standard_normal(100))
        np.testing.assert_array_equal(average_ols([data]), ols_per_environment(data))

    def test_confounding_bias_of_the_average(self, worked_envs):
        # per-environment coefficients 1.5 and 2 average to 1.75 while the
        # invariant coefficient is 1: the averaging baseline keeps the bias
        avg = np.mean([m.beta_e for m in worked_envs], axis=0)
        assert avg[0] == pytest.approx(1.75)

    def test_identical_environments_average_works_closed_form_refuses(self):
        # copying one unconfounded environment: the average still estimates
        # the coefficient, while the joint fit correctly reports that
        # identical environments cannot identify it
        from klreg.core import fit_kl
        from klreg.errors import IllPosedError
        from klreg.moments import estimate_moments

        d = 3
        model = SemModel(
            b_xx=np.zeros((d, d)),
            b_xh=np.zeros((d, 1)),
            beta_star=[1.0, -0.5, 0.0],
            eta0=[1.0],
            sigma_h=[[1.0]],
        )
        noise = EnvironmentNoiseSpec(sigma_ex=np.eye(d), sigma_ey=1.0)
        data = sample_environment(model, noise, 100_000, seed=12)
        copies = [data, data, data]
        assert np.linalg.norm(average_ols(copies) - model.beta_star) <= 0.02
        with pytest.raises(IllPosedError):
            fit_kl([estimate_moments(c) for c in copies])

    def test_unconfounded_average_recovers_truth(self):
        d = 3
        model = SemModel(
            b_xx=np.zeros((d, d)),
            b_xh=np.zeros((d, 1)),
            beta_star=[1.0, 0.0, -0.5],
            eta0=[1.0],
            sigma_h=[[1.0]],
        )
        datasets = []
        for e in range(3):
            noise = EnvironmentNoiseSpec(sigma_ex=(1.0 + e) * np.eye(d), sigma_ey=1.0)
            datasets.append(sample_environment(model, noise, 100_000, seed=(2, e)))
        avg = average_ols(datasets)
        assert np.linalg.norm(avg - model.beta_star) <= 0.02

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            average_ols([])


class TestMse:
    def test_exact_is_zero(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_zero_benchmark(self):
        beta_star = np.zeros(20)
        beta_star[:10] = 1.0
        assert mse(np.zeros(20), beta_star) == pytest.approx(0.5)

    def test_worked_scalar(self):
        assert mse([1.75], [1.0]) == pytest.approx(0.5625)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mse([1.0], [1.0, 2.0])


class TestSupportMetrics:
    def test_exact_recovery(self):
        truth = np.array([1.0, 0.0, 1.0, 0.0])
        got = support_metrics([0.9, 0.0, 1.2, 0.0], truth)
        assert got == (1.0, 1.0, 1.0)

    def test_all_zero_estimate(self):
        truth = np.zeros(12)
        truth[:10] = 1.0
        got = support_metrics(np.zeros(12), truth)
        assert got.recall == 0.0
        assert got.precision == 1.0  # nothing predicted
        assert got.f1 == 0.0

    def test_empty_truth_convention(self):
        got = support_metrics(np.zeros(3), np.zeros(3))
        assert got.recall == 1.0
        assert got.precision == 1.0

    def test_hand_counts(self):
        truth = np.zeros(20)
        truth[:10] = 1.0
        estimate = np.zeros(20)
        estimate[:8] = 0.5   # 8 of 10 true
        estimate[15:17] = 0.5  # 2 false
        got = support_metrics(estimate, truth, threshold=0.1)
        assert got.precision == pytest.approx(0.8)
        assert got.recall == pytest.approx(0.8)
        assert got.f1 == pytest.approx(0.8)

    def test_threshold_gates_magnitude(self):
        truth = np.array([1.0, 0.0])
        assert support_metrics([0.05, 0.0], truth, threshold=0.1).recall == 0.0
        assert support_metrics([0.05, 0.0], truth, threshold=0.01).recall == 1.0


class TestAupr:
    def test_perfect_ranking(self):
        ranking = EdgeRanking(scores=[("a", 3.0), ("b", 2.0), ("c", 1.0)], truth={"a", "b"})
        assert aupr(ranking) == pytest.approx(1.0)

    def test_hand_value(self):
        ranking = EdgeRanking(
            scores=[(0, 0.9), (1, 0.8), (2, 0.2)], truth={0, 2}
        )
        assert aupr(ranking) == pytest.approx(5.0 / 6.0)

    def test_random_scores_match_prevalence(self):
        values = []
        for seed in range(10):
            rng = np.random.default_rng(seed)
            scores = [(i, float(s)) for i, s in enumerate(rng.random(1000))]
            truth = set(range(100))
            values.append(aupr(EdgeRanking(scores=scores, truth=truth)))
        assert abs(np.mean(values) - 0.1) <= 0.03

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(3)
        scores = [(i, float(s)) for i, s in enumerate(rng.random(50))]
        truth = set(rng.choice(50, size=10, replace=False).tolist())
        base = aupr(EdgeRanking(scores=scores, truth=truth))
        for transform in (np.exp, np.tanh, lambda v: 3 * v + 7, lambda v: v**3):
            mapped = [(i, float(transform(s))) for i, s in scores]
            assert aupr(EdgeRanking(scores=mapped, truth=truth)) == pytest.approx(base)

    def test_ties_broken_by_candidate_position(self):
        # equal scores: the earlier-listed candidate ranks first
        ranking = EdgeRanking(scores=[("pos", 1.0), ("neg", 1.0)], truth={"pos"})
        assert aupr(ranking) == pytest.approx(1.0)
        ranking = EdgeRanking(scores=[("neg", 1.0), ("pos", 1.0)], truth={"pos"})
        assert aupr(ranking) == pytest.approx(0.5)

    def test_empty_truth_rejected(self):
        with pytest.raises(ValueError):
            aupr(EdgeRanking(scores=[("a", 1.0)], truth=set()))

    def test_stray_truth_rejected(self):
        with pytest.raises(ValueError):
            aupr(EdgeRanking(scores=[("a", 1.0)], truth={"zz"}))

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValueError):
            EdgeRanking(scores=[("a", float("nan"))], truth={"a"})


class TestPrCurve:
    def test_rows_sweep_thresholds(self):
        ranking = EdgeRanking(scores=[(0, 0.9), (1, 0.8), (2, 0.2)], truth={0, 2})
        rows = pr_curve(ranking)
        assert rows == [
            (0.9, 1.0, 0.5),
            (0.8, 0.5, 0.5),
            (0.2, pytest.approx(2 / 3), 1.0),
        ]
