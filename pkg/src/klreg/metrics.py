"""Reference estimators and evaluation metrics for the experiments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .moments import estimate_moments


def ols_per_environment(data, jitter=0.0) -> np.ndarray:
    """Least-squares coefficient of one environment (mean-centered)."""
    return estimate_moments(data, jitter=jitter).beta_e


def average_ols(datasets, jitter=0.0) -> np.ndarray:
    """Unweighted mean of per-environment least-squares coefficients.

    The classic meta-analysis baseline; biased under confounding because
    every per-environment coefficient carries its own confounding term.
    """
    if len(datasets) == 0:
        raise ValueError("at least one environment is required")
    return np.mean([ols_per_environment(d, jitter) for d in datasets], axis=0)


def mse(beta_hat, beta_star) -> float:
    """Mean squared error (1/D) * ||beta_hat - beta_star||^2."""
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_star = np.asarray(beta_star, dtype=float)
    if beta_hat.shape != beta_star.shape:
        raise ValueError(
            f"length mismatch: {beta_hat.shape} vs {beta_star.shape}"
        )
    diff = beta_hat - beta_star
    return float(diff @ diff) / beta_hat.shape[0]


class SupportMetrics(NamedTuple):
    precision: float
    recall: float
    f1: float


def support_metrics(beta_hat, beta_star, threshold=1e-6) -> SupportMetrics:
    """Precision/recall/F1 of the recovered support.

    The support is the set of coefficients above `threshold` in magnitude
    (the default suits penalized fits, whose zeros are exact). Precision is
    1 when nothing is predicted, recall is 1 when the true support is empty.
    """
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    pred = np.abs(np.asarray(beta_hat, dtype=float)) > threshold
    true = np.asarray(beta_star, dtype=float) != 0.0
    if pred.shape != true.shape:
        raise ValueError("length mismatch between estimate and truth")
    tp = int(np.sum(pred & true))
    precision = tp / int(pred.sum()) if pred.any() else 1.0
    recall = tp / int(true.sum()) if true.any() else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return SupportMetrics(precision, recall, f1)


@dataclass(eq=False)
class EdgeRanking:
    """Scored candidates plus the set of true positives.

    scores maps each candidate (an index or a (regulator, target) pair) to a
    finite real score, larger meaning more confident. skipped records
    candidates' targets that could not be scored, with reasons.
    """

    scores: list
    truth: frozenset = frozenset()
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        for key, score in self.scores:
            if not np.isfinite(score):
                raise ValueError(f"score for {key!r} is not finite")
        self.truth = frozenset(self.truth)

    def candidates(self):
        return [key for key, _ in self.scores]


def _check_truth(ranking: EdgeRanking):
    keys = set(ranking.candidates())
    if not ranking.truth:
        raise ValueError("the truth set is empty; ranking metrics are undefined")
    stray = ranking.truth - keys
    if stray:
        raise ValueError(f"truth contains non-candidates: {sorted(stray)[:5]}")


def _descending(ranking: EdgeRanking):
    # ties broken by candidate position, ascending
    indexed = list(enumerate(ranking.scores))
    indexed.sort(key=lambda item: (-item[1][1], item[0]))
    return [(key, score) for _, (key, score) in indexed]


def aupr(ranking: EdgeRanking) -> float:
    """Area under the precision-recall curve as step-wise average precision.

        AP = sum_k (R_k - R_{k-1}) * P_k

    over the score-descending sweep, the convention used for network
    inference challenges (trapezoidal interpolation is deliberately not
    offered so there is exactly one number).
    """
    _check_truth(ranking)
    n_true = len(ranking.truth)
    tp = 0
    ap = 0.0
    for rank, (key, _) in enumerate(_descending(ranking), start=1):
        if key in ranking.truth:
            tp += 1
            ap += (1.0 / n_true) * (tp / rank)
    return ap


def pr_curve(ranking: EdgeRanking):
    """Precision/recall sweep rows: (score threshold, precision, recall)."""
    _check_truth(ranking)
    n_true = len(ranking.truth)
    rows = []
    tp = 0
    for rank, (key, score) in enumerate(_descending(ranking), start=1):
        if key in ranking.truth:
            tp += 1
        rows.append((float(score), tp / rank, tp / n_true))
    return rows
