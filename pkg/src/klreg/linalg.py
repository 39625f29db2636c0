"""Dense linear-algebra helpers shared by the estimation modules.

Everything operates on float64 numpy arrays. Linear systems go through
factorizations; an explicit inverse is formed only where the inverse matrix
is itself the quantity a formula needs.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

SYMMETRY_TOL = 1e-10


def as_vector(x, n=None, name="vector"):
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"{name} must have length {n}, got {v.shape[0]}")
    return v


def as_square(a, n=None, name="matrix"):
    m = np.asarray(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if n is not None and m.shape[0] != n:
        raise ValueError(f"{name} must be {n}x{n}, got {m.shape[0]}x{m.shape[0]}")
    return m


def check_symmetric(a, tol=SYMMETRY_TOL, name="matrix"):
    """Validate symmetry to `tol` (absolute, relative to the largest entry)."""
    a = as_square(a, name=name)
    scale = max(1.0, float(np.abs(a).max()))
    gap = float(np.abs(a - a.T).max())
    if gap > tol * scale:
        raise ValueError(f"{name} is not symmetric (max asymmetry {gap:.3e})")
    return a


def cholesky_spd(a, name="matrix"):
    """Cholesky factor of a symmetric positive definite matrix.

    Raises ValueError when the matrix is not PD; this is the single gate
    every PD precondition in the package goes through.
    """
    a = check_symmetric(a, name=name)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


def spd_solve(a, b, name="matrix"):
    """Solve a @ x = b for symmetric positive definite a."""
    chol = cholesky_spd(a, name=name)
    return sla.cho_solve((chol, True), np.asarray(b, dtype=float))


def spd_inverse(a, name="matrix"):
    """Explicit inverse of an SPD matrix via solve-against-identity."""
    chol = cholesky_spd(a, name=name)
    return sla.cho_solve((chol, True), np.eye(a.shape[0]))


def cond_2(a):
    """Spectral condition number; inf when the matrix is singular."""
    try:
        c = float(np.linalg.cond(np.asarray(a, dtype=float), 2))
    except np.linalg.LinAlgError:
        return float("inf")
    return c if np.isfinite(c) else float("inf")


def logdet_spd(a, name="matrix"):
    chol = cholesky_spd(a, name=name)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def symmetrize(a):
    return 0.5 * (a + a.T)


def random_spd(d, rng, eig_range=(0.3, 2.5)):
    """Random SPD matrix with a controlled spectrum.

    Orthogonal basis from the QR factorization of a Gaussian matrix,
    eigenvalues uniform on `eig_range`.
    """
    qmat, rmat = np.linalg.qr(rng.standard_normal((d, d)))
    # fix the sign convention so the draw is a deterministic function of the rng
    qmat = qmat * np.sign(np.diag(rmat))
    eigs = rng.uniform(eig_range[0], eig_range[1], size=d)
    return symmetrize((qmat * eigs) @ qmat.T)
