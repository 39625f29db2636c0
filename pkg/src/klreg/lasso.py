"""L1-penalized coefficient estimation with the confounding direction free.

The penalized objective adds lam * ||beta||_1 to the covariance-matching
loss; the confounding direction eta is never penalized because it absorbs
the environment-invariant bias. Since the eta-subproblem at fixed beta is a
single positive definite linear system, eta is profiled out exactly and the
remaining problem in beta is a smooth convex quadratic plus an L1 term,
solved by accelerated proximal gradient with monotone safeguarding and a
backtracking line search.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .core import KlFit, _aggregates, _s_beta, _stationarity_residual, kl_loss, s_beta_condition
from .errors import ConvergenceError
from .linalg import cholesky_spd, symmetrize
from .moments import estimate_moments
from .sem import EnvironmentData, derive_rng


@dataclass
class LassoConfig:
    """Penalty strength and solver controls.

    lam is the L1 penalty (the field avoids the reserved word `lambda`).
    tol is the relative objective-change tolerance; the KKT residual must
    additionally fall below 10 * tol * max(lambda_max, 1).
    """

    lam: float
    max_iter: int = 10_000
    tol: float = 1e-8
    path_grid: Sequence[float] | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(eq=False)
class _ProfiledProblem:
    """Quadratic-plus-L1 problem after eliminating eta.

    With the aggregate sums A = sigma_sum, M = inv_sum, w = weight,
    b1 = sigma_coef_sum, b0 = coef_sum:

        eta*(beta) = M^-1 (b0 - w beta)
        f(beta)    = 0.5 beta' H beta - c' beta + const
        H          = A - w^2 M^-1,   c = b1 - w M^-1 b0

    H is symmetric positive semidefinite (the loss is jointly convex).
    """

    hessian: np.ndarray
    linear: np.ndarray
    inv_sum_chol: np.ndarray
    agg: object

    def eta_for(self, beta):
        rhs = self.agg.coef_sum - self.agg.weight * beta
        return sla.cho_solve((self.inv_sum_chol, True), rhs)


def _profiled(agg) -> _ProfiledProblem:
    d = agg.sigma_sum.shape[0]
    chol = cholesky_spd(agg.inv_sum, name="inverse-covariance sum")
    minv = sla.cho_solve((chol, True), np.eye(d))
    hessian = symmetrize(agg.sigma_sum - agg.weight**2 * minv)
    linear = agg.sigma_coef_sum - agg.weight * (minv @ agg.coef_sum)
    return _ProfiledProblem(hessian, linear, chol, agg)


def lambda_max(envs) -> float:
    """Smallest penalty at which the all-zero coefficient is optimal.

    Equals the sup-norm of the profiled gradient at beta = 0 with eta at its
    exact optimum; the standard anchor for penalty grids.
    """
    prob = _profiled(_aggregates(envs))
    return float(np.abs(prob.linear).max())


def default_grid(lmax, num=30, min_ratio=1e-4) -> np.ndarray:
    """Decreasing log-spaced penalty grid over [min_ratio, 1] * lmax."""
    if lmax <= 0:
        raise ValueError("lmax must be positive")
    return np.geomspace(lmax, min_ratio * lmax, num)


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _kkt_residual(grad, beta, lam):
    """Sup-norm violation of the subgradient optimality conditions."""
    active = beta != 0.0
    res = 0.0
    if np.any(active):
        res = float(np.abs(grad[active] + lam * np.sign(beta[active])).max())
    if np.any(~active):
        slack = np.abs(grad[~active]) - lam
        res = max(res, float(np.maximum(slack, 0.0).max()))
    return res


def _prox_solve(hessian, linear, lam, beta0, max_iter, tol, kkt_tol):
    """Monotone accelerated proximal gradient for 0.5 b'Hb - c'b + lam|b|_1.

    Backtracking halves the step whenever the quadratic majorization at the
    extrapolated point fails; the accepted iterate never increases the
    objective, and the momentum restarts whenever the extrapolated step
    overshoots. Returns (beta, objective history, kkt residual, iterations).
    """

    def smooth(b):
        return 0.5 * float(b @ hessian @ b) - float(linear @ b)

    def objective(b):
        return smooth(b) + lam * float(np.abs(b).sum())

    lips = float(np.linalg.eigvalsh(hessian)[-1])
    step0 = 1.0 / max(lips, 1e-30)
    prev = beta0.copy()
    f_prev = objective(prev)
    y = prev.copy()
    t_k = 1.0
    history = [f_prev]
    kkt = _kkt_residual(hessian @ prev - linear, prev, lam)
    if kkt <= kkt_tol:
        return prev, history, kkt, 0
    next_polish = 250
    for it in range(1, max_iter + 1):
        grad_y = hessian @ y - linear
        smooth_y = smooth(y)
        step = step0
        while True:
            z = _soft_threshold(y - step * grad_y, step * lam)
            dz = z - y
            model = smooth_y + float(grad_y @ dz) + float(dz @ dz) / (2.0 * step)
            if smooth(z) <= model + 1e-12 * (1.0 + abs(model)):
                break
            step *= 0.5
        fz = objective(z)
        if fz <= f_prev:
            cur, f_cur = z, fz
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
            y = cur + (t_k / t_next) * (z - cur) + ((t_k - 1.0) / t_next) * (cur - prev)
        else:
            # overshoot: keep the old iterate and restart the momentum
            cur, f_cur = prev, f_prev
            t_next = 1.0
            y = cur.copy()
        rel_change = abs(f_prev - f_cur) / max(1.0, abs(f_cur))
        prev, f_prev = cur, f_cur
        t_k = t_next
        history.append(f_cur)
        kkt = _kkt_residual(hessian @ cur - linear, cur, lam)
        if kkt <= kkt_tol and rel_change <= tol:
            return cur, history, kkt, it
        if it >= next_polish:
            # once the support has stabilized, the restricted solve finishes
            # what first-order steps would take many iterations to polish
            next_polish *= 2
            polished = _polish(hessian, linear, lam, cur, kkt_tol=kkt_tol)
            if polished is not None:
                polished_kkt = _kkt_residual(hessian @ polished - linear, polished, lam)
                if polished_kkt <= kkt_tol:
                    history.append(objective(polished))
                    return polished, history, polished_kkt, it
    return prev, history, kkt, max_iter


def _restricted_solve(hessian, linear, lam, support, signs):
    """Stationarity solve on a fixed support with fixed signs, or None."""
    sub_h = hessian[np.ix_(support, support)]
    sub_rhs = linear[support] - lam * signs[support]
    try:
        u = np.linalg.solve(sub_h, sub_rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(u)):
        return None
    scale = 1.0 + float(np.abs(sub_rhs).max())
    if float(np.abs(sub_h @ u - sub_rhs).max()) > 1e-8 * scale:
        return None
    return u


def _polish(hessian, linear, lam, beta, kkt_tol=0.0, max_rounds=200):
    """Active-set refinement from the current iterate's sign pattern.

    Repeatedly solves the stationarity system on the working support: sign
    flips reassign the working signs (dropping the flipped coordinates on a
    repeat, so cycles terminate), and inactive coordinates whose gradients
    exceed the penalty are brought in, strongest violators as a block. The
    refined candidate is accepted only when the subgradient conditions hold
    within kkt_tol and the objective has not increased; on any failure None
    is returned and the caller keeps the iterative solution.
    """
    d = beta.shape[0]
    gate = max(kkt_tol, lam * 1e-9 + 1e-12)

    def objective(b):
        return 0.5 * float(b @ hessian @ b) - float(linear @ b) + lam * float(np.abs(b).sum())

    if lam == 0:
        support = np.ones(d, dtype=bool)
        u = _restricted_solve(hessian, linear, 0.0, support, np.zeros(d))
        if u is None:
            return None
        candidate = u.copy()
        if objective(candidate) > objective(beta) + 1e-12 * (1.0 + abs(objective(beta))):
            return None
        return candidate

    support = beta != 0.0
    signs = np.sign(beta)
    seen = set()
    for _ in range(max_rounds):
        if not support.any():
            candidate = np.zeros(d)
        else:
            u = _restricted_solve(hessian, linear, lam, support, signs)
            if u is None:
                return None
            flipped = np.sign(u) != signs[support]
            if flipped.any():
                key = (support.tobytes(), signs.tobytes())
                idx = np.flatnonzero(support)
                if key in seen:
                    # reassignment cycled: shrink the support instead
                    support = support.copy()
                    support[idx[flipped]] = False
                    signs = signs * support
                else:
                    seen.add(key)
                    signs = signs.copy()
                    signs[idx] = np.sign(u)
                    support = support & (signs != 0.0)
                continue
            candidate = np.zeros(d)
            candidate[support] = u
        grad = hessian @ candidate - linear
        slack = np.where(candidate == 0.0, np.abs(grad) - lam, -np.inf)
        worst = float(slack.max()) if np.any(candidate == 0.0) else -np.inf
        if worst <= gate:
            if objective(candidate) > objective(beta) + 1e-12 * (1.0 + abs(objective(beta))):
                return None
            return candidate
        # bring in the strongly violated inactive coordinates as a block
        entering = slack >= max(0.3 * worst, gate)
        support = support | entering
        signs = np.where(entering, -np.sign(grad), signs)
    return None


def fit_lasso(envs, cfg: LassoConfig, start=None) -> KlFit:
    """Minimize the penalized loss; beta may be exactly sparse, eta is dense.

    Raises ConvergenceError (carrying the final KKT residual) if the solver
    does not meet its optimality tolerance within cfg.max_iter iterations.
    Unlike the closed form, no solvability of the scaling matrix is required.
    """
    agg = _aggregates(envs)
    prob = _profiled(agg)
    d = agg.sigma_sum.shape[0]
    beta0 = np.zeros(d) if start is None else np.array(start, dtype=float)
    scale = max(float(np.abs(prob.linear).max()), 1.0)
    kkt_tol = 10.0 * cfg.tol * scale
    beta, history, kkt, n_iter = _prox_solve(
        prob.hessian, prob.linear, cfg.lam, beta0, cfg.max_iter, cfg.tol, kkt_tol
    )
    polished = _polish(prob.hessian, prob.linear, cfg.lam, beta, kkt_tol=kkt_tol)
    if polished is not None:
        beta = polished
        kkt = _kkt_residual(prob.hessian @ beta - prob.linear, beta, cfg.lam)
    if kkt > kkt_tol:
        raise ConvergenceError(
            f"penalized solver stopped after {n_iter} iterations with KKT "
            f"residual {kkt:.3e} > {kkt_tol:.3e}",
            kkt_residual=kkt,
            n_iter=n_iter,
        )
    eta = prob.eta_for(beta)
    s_beta = _s_beta(agg)
    return KlFit(
        beta=beta,
        eta=eta,
        s_beta=s_beta,
        cond_s_beta=s_beta_condition(agg, s_beta),
        cov=None,
        loss_at_opt=kl_loss(envs, beta, eta) + cfg.lam * float(np.abs(beta).sum()),
        stationarity_residual=_stationarity_residual(agg, beta, eta),
        lam=cfg.lam,
        kkt_residual=kkt,
        n_iter=n_iter,
    )


@dataclass(eq=False)
class LassoPath:
    """Warm-started fits along a decreasing penalty grid.

    entry_lambda[j] is the largest grid penalty at which coefficient j is
    nonzero (0.0 if it never enters); larger means earlier entry, which is
    the edge score used for network ranking.
    """

    lambdas: np.ndarray
    fits: list
    entry_lambda: np.ndarray

    def __iter__(self):
        return iter(zip(self.lambdas, self.fits))

    def __len__(self):
        return len(self.fits)

    def rows(self):
        """CSV-ready rows: (lambda, coefficient index, value, entry lambda)."""
        for lam, fit in zip(self.lambdas, self.fits):
            for j, value in enumerate(fit.beta):
                yield float(lam), j, float(value), float(self.entry_lambda[j])

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "coefficient", "value", "entry_lambda"])
            writer.writerows(self.rows())
        return path


def lasso_path(envs, grid, max_iter=10_000, tol=1e-8) -> LassoPath:
    """Fit along a strictly decreasing grid, warm-starting each solve."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("grid must be a nonempty 1-d sequence")
    if np.any(grid[1:] >= grid[:-1]):
        raise ValueError("grid must be strictly decreasing")
    if np.any(grid < 0):
        raise ValueError("grid values must be nonnegative")
    d = envs[0].d
    entry = np.zeros(d)
    fits = []
    start = None
    for lam in grid:
        fit = fit_lasso(envs, LassoConfig(lam=float(lam), max_iter=max_iter, tol=tol), start=start)
        fits.append(fit)
        start = fit.beta
        newly = (entry == 0.0) & (fit.beta != 0.0)
        entry[newly] = lam
    return LassoPath(lambdas=grid, fits=fits, entry_lambda=entry)


def select_lambda_cross_fit(data, grid, folds, seed=0, jitter=0.0, max_iter=10_000, tol=1e-8):
    """Pick the penalty minimizing summed held-out loss across folds.

    Each environment is split within itself into `folds` parts (never across
    environments, which would destroy the covariance structure the method
    relies on). For every fold, moments estimated on the remaining parts are
    fitted along the grid and scored by the loss on the held-out parts'
    moments. Deterministic given the seed.
    """
    if folds < 2:
        raise ValueError("folds must be at least 2")
    grid = np.asarray(grid, dtype=float)
    if len(grid) == 0:
        raise ValueError("grid must be nonempty")
    d = data[0].d
    for env in data:
        if env.n < folds * (d + 1):
            raise ValueError(
                f"environment {env.env_id or '?'} has {env.n} samples; "
                f"cross-fitting with {folds} folds needs at least {folds * (d + 1)}"
            )
    chunks_per_env = []
    for i, env in enumerate(data):
        perm = derive_rng(seed, i).permutation(env.n)
        chunks_per_env.append(np.array_split(perm, folds))
    losses = np.zeros(len(grid))
    for k in range(folds):
        train_moms = []
        test_moms = []
        for env, chunks in zip(data, chunks_per_env):
            test_idx = chunks[k]
            train_idx = np.concatenate([c for j, c in enumerate(chunks) if j != k])
            train_moms.append(
                estimate_moments(
                    EnvironmentData(env.x[train_idx], env.y[train_idx], env.env_id), jitter
                )
            )
            test_moms.append(
                estimate_moments(
                    EnvironmentData(env.x[test_idx], env.y[test_idx], env.env_id), jitter
                )
            )
        path = lasso_path(train_moms, grid, max_iter=max_iter, tol=tol)
        for i, fit in enumerate(path.fits):
            losses[i] += kl_loss(test_moms, fit.beta, fit.eta)
    return float(grid[int(np.argmin(losses))])
