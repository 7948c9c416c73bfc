"""Shared fixtures: small synthetic datasets for each model family."""

import numpy as np
import pytest

from sveb.families import AreaRecord, HyperParams, get_family

FAMILIES = ["gaussian", "poisson_gamma", "binomial_beta"]


def random_phi(family_id, rng, p=2):
    """A hyperparameter vector with the mean kept in a comfortable range."""
    fam = get_family(family_id)
    if fam.family_id == "gaussian":
        beta = rng.normal(0.0, 1.0, size=p)
    elif fam.family_id == "poisson_gamma":
        beta = rng.normal(0.3, 0.4, size=p)
    else:
        beta = rng.normal(0.0, 0.6, size=p)
    nu = float(rng.uniform(0.5, 40.0))
    return HyperParams(beta=beta, nu=nu)


def make_records(family_id, m, rng, p=2, n_lo=5, n_hi=30):
    """Synthetic sampled-area records drawn from the two-stage model."""
    fam = get_family(family_id)
    phi = random_phi(family_id, rng, p=p)
    records = []
    for i in range(m):
        x = np.ones(p)
        x[1:] = rng.uniform(-1.0, 1.0, size=p - 1)
        u = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        n = float(rng.integers(n_lo, n_hi + 1))
        if fam.family_id == "gaussian":
            n = float(rng.uniform(0.5, 4.0))
        eta = float(x @ phi.beta)
        mean = float(fam.mean_link(np.asarray(eta)))
        mu = fam.sample_prior(phi.nu, mean, rng)
        y = float(fam.sample_data(mu, n, rng))
        records.append(AreaRecord(id=f"a{i:03d}", y=y, n=n, x=x, u=u))
    return records


@pytest.fixture(params=FAMILIES)
def family_id(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(20240817))
