"""Shared fixtures and generators for the test suite."""

import numpy as np
import pytest

from klreg.linalg import random_spd
from klreg.moments import moments_from_triplet


@pytest.fixture
def worked_envs():
    """The hand-checkable scalar pair: sigma=(2,1), s2=(1,1), beta=(1.5,2).

    Consistent with beta_star=1, eta_star=1; every closed-form quantity is
    computable by hand for this pair.
    """
    return [
        moments_from_triplet([[2.0]], [1.5], 1.0, n=100, env_id="e1"),
        moments_from_triplet([[1.0]], [2.0], 1.0, n=100, env_id="e2"),
    ]


def make_consistent_envs(d, n_envs, rng, resid_range=(0.5, 2.0), n=0):
    """Random environments exactly consistent with a shared (beta*, eta*).

    Covariate covariances are fresh random SPD draws; each environment's
    coefficient is beta* + sigma_e^-1 eta*, so the population fit must
    recover (beta*, eta*) exactly.
    """
    beta_star = rng.standard_normal(d)
    eta_star = rng.standard_normal(d)
    envs = []
    for e in range(n_envs):
        sigma = random_spd(d, rng)
        beta_e = beta_star + np.linalg.solve(sigma, eta_star)
        resid = float(rng.uniform(*resid_range))
        envs.append(moments_from_triplet(sigma, beta_e, resid, n=n, env_id=f"env{e}"))
    return envs, beta_star, eta_star
