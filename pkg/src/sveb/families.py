"""Conjugate two-stage area-level model families and their closed forms.

Three natural-exponential-family models with quadratic variance function
``Q(mu) = v0 + v1*mu + v2*mu**2`` and conjugate second stage:

* ``gaussian``       -- normal sampling / normal prior (Fay-Herriot);
  ``n = 1/D`` with ``D`` the known sampling variance, ``nu = 1/A`` with
  ``A`` the random-effect variance.
* ``poisson_gamma``  -- Poisson counts ``z = n*y`` with a gamma prior on
  the rate; the marginal of ``z`` is negative binomial.
* ``binomial_beta``  -- binomial counts ``z = n*y`` with a beta prior on
  the success probability; the marginal of ``z`` is beta-binomial.

Conjugacy makes the posterior of the area mean a member of the same
family with parameters ``(n + nu, mu_tilde)``, which gives the closed
form shrinkage estimator and an analytic marginal likelihood.  All
functions here are pure and accept scalars or numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, expit, gammaln

from .errors import InvalidInputError

__all__ = [
    "Family",
    "Gaussian",
    "PoissonGamma",
    "BinomialBeta",
    "GAUSSIAN",
    "POISSON_GAMMA",
    "BINOMIAL_BETA",
    "get_family",
    "AreaRecord",
    "HyperParams",
    "mean_link",
    "variance_fn",
    "bayes_estimate",
    "prior_variance",
    "log_norm_const",
    "marginal_loglik",
    "r1",
    "sample_area",
]

# Hyperparameter precision cap: local data with no overdispersion push nu
# to infinity; everything downstream stays finite below this bound.
NU_MAX = 1e8
# Gaussian random-effect variance floor, equivalent to the nu cap.
A_MIN = 1.0 / NU_MAX


@dataclass(frozen=True)
class AreaRecord:
    """One small area: direct estimate plus design information.

    ``y`` is the direct estimator of the area mean; for the count
    families ``y = z/n`` with ``z`` the observed count.  ``n`` is the
    known scale (1/D for gaussian).  ``x`` carries the intercept slot.
    ``u`` is the 2-d coordinate used for kernel weighting.
    """

    id: str
    y: float
    n: float
    x: np.ndarray
    u: tuple[float, float]
    sampled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if self.sampled and not self.n > 0:
            raise InvalidInputError(f"area {self.id}: sampled area needs n > 0, got {self.n}")


@dataclass
class HyperParams:
    """Model parameter vector: regression coefficients and prior precision."""

    beta: np.ndarray
    nu: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if not self.nu > 0:
            raise InvalidInputError(f"nu must be positive, got {self.nu}")


class Family:
    """Base class; subclasses fill in the family-specific closed forms."""

    family_id: str
    v0: float
    v1: float
    v2: float

    # ---- mean scale -------------------------------------------------

    def mean_link(self, eta):
        """psi'(eta): linear predictor -> mean."""
        raise NotImplementedError

    def link_inverse(self, mu):
        """Inverse of :meth:`mean_link`, used for initialization."""
        raise NotImplementedError

    def in_mean_domain(self, mu) -> bool:
        raise NotImplementedError

    def clip_to_mean_domain(self, mu):
        """Pull a crude moment estimate into the open mean domain."""
        return mu

    def variance(self, mu):
        """Quadratic variance function Q(mu)."""
        mu = np.asarray(mu, dtype=float)
        return self.v0 + self.v1 * mu + self.v2 * mu**2

    # ---- exponential-family pieces ---------------------------------

    def log_norm_const(self, nu, m):
        """C(nu, m): log normalizing constant of the conjugate prior."""
        raise NotImplementedError

    def log_c(self, y, n):
        """c(y, n): data-only term of the first-stage log density."""
        raise NotImplementedError

    # ---- exact samplers --------------------------------------------

    def sample_prior(self, nu, m, rng: np.random.Generator):
        """Draw the area mean mu from the conjugate prior."""
        raise NotImplementedError

    def sample_data(self, mu, n, rng: np.random.Generator):
        """Draw the direct estimate y given the true mean mu."""
        raise NotImplementedError


class Gaussian(Family):
    family_id = "gaussian"
    v0, v1, v2 = 1.0, 0.0, 0.0

    def mean_link(self, eta):
        return np.asarray(eta, dtype=float) + 0.0

    def link_inverse(self, mu):
        return np.asarray(mu, dtype=float) + 0.0

    def in_mean_domain(self, mu) -> bool:
        return bool(np.all(np.isfinite(mu)))

    def log_norm_const(self, nu, m):
        nu = np.asarray(nu, dtype=float)
        m = np.asarray(m, dtype=float)
        return 0.5 * np.log(nu / (2.0 * np.pi)) - 0.5 * nu * m**2

    def log_c(self, y, n):
        y = np.asarray(y, dtype=float)
        n = np.asarray(n, dtype=float)
        return -0.5 * n * y**2 + 0.5 * np.log(n / (2.0 * np.pi))

    def sample_prior(self, nu, m, rng):
        return rng.normal(m, 1.0 / np.sqrt(nu))

    def sample_data(self, mu, n, rng):
        return rng.normal(mu, 1.0 / np.sqrt(n))


class PoissonGamma(Family):
    family_id = "poisson_gamma"
    v0, v1, v2 = 0.0, 1.0, 0.0

    def mean_link(self, eta):
        return np.exp(eta)

    def link_inverse(self, mu):
        return np.log(mu)

    def in_mean_domain(self, mu) -> bool:
        return bool(np.all(np.asarray(mu) > 0))

    def clip_to_mean_domain(self, mu):
        return np.maximum(mu, 1e-8)

    def log_norm_const(self, nu, m):
        nu = np.asarray(nu, dtype=float)
        m = np.asarray(m, dtype=float)
        return nu * m * np.log(nu) - gammaln(nu * m)

    def log_c(self, y, n):
        # z log n - log z!  with z = n*y
        y = np.asarray(y, dtype=float)
        n = np.asarray(n, dtype=float)
        z = n * y
        return z * np.log(n) - gammaln(z + 1.0)

    def sample_prior(self, nu, m, rng):
        return rng.gamma(shape=nu * m, scale=1.0 / nu)

    def sample_data(self, mu, n, rng):
        return rng.poisson(n * mu) / n


class BinomialBeta(Family):
    family_id = "binomial_beta"
    v0, v1, v2 = 0.0, 1.0, -1.0

    def mean_link(self, eta):
        return expit(eta)

    def link_inverse(self, mu):
        mu = np.asarray(mu, dtype=float)
        return np.log(mu) - np.log1p(-mu)

    def in_mean_domain(self, mu) -> bool:
        mu = np.asarray(mu)
        return bool(np.all((mu > 0) & (mu < 1)))

    def clip_to_mean_domain(self, mu):
        return np.clip(mu, 1e-8, 1.0 - 1e-8)

    def log_norm_const(self, nu, m):
        nu = np.asarray(nu, dtype=float)
        m = np.asarray(m, dtype=float)
        return -betaln(nu * m, nu * (1.0 - m))

    def log_c(self, y, n):
        # log binomial(n, z) with z = n*y
        y = np.asarray(y, dtype=float)
        n = np.asarray(n, dtype=float)
        z = n * y
        return gammaln(n + 1.0) - gammaln(z + 1.0) - gammaln(n - z + 1.0)

    def sample_prior(self, nu, m, rng):
        return rng.beta(nu * m, nu * (1.0 - m))

    def sample_data(self, mu, n, rng):
        n_int = np.rint(n).astype(int)
        return rng.binomial(n_int, mu) / n


GAUSSIAN = Gaussian()
POISSON_GAMMA = PoissonGamma()
BINOMIAL_BETA = BinomialBeta()

_FAMILIES = {f.family_id: f for f in (GAUSSIAN, POISSON_GAMMA, BINOMIAL_BETA)}


def get_family(name) -> Family:
    """Resolve a family by id string (a Family instance passes through)."""
    if isinstance(name, Family):
        return name
    try:
        return _FAMILIES[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown family {name!r}; expected one of {sorted(_FAMILIES)}"
        ) from None


# ---------------------------------------------------------------------------
# Module-level operations (thin, validated wrappers around the classes)
# ---------------------------------------------------------------------------


def mean_link(spec: Family, eta):
    return get_family(spec).mean_link(eta)


def variance_fn(spec: Family, mu):
    spec = get_family(spec)
    if not spec.in_mean_domain(mu):
        raise InvalidInputError(f"{spec.family_id}: mean {mu} outside the mean domain")
    return spec.variance(mu)


def _prior_mean(spec: Family, phi: HyperParams, x):
    return spec.mean_link(np.dot(np.asarray(x, dtype=float), phi.beta))


def bayes_estimate(y, n, phi: HyperParams, x, spec: Family = GAUSSIAN):
    """Posterior mean (n*y + nu*m)/(n + nu), the shrinkage estimator."""
    spec = get_family(spec)
    n = np.asarray(n, dtype=float)
    if np.any(n + phi.nu <= 0):
        raise InvalidInputError("n + nu must be positive")
    m = _prior_mean(spec, phi, x)
    return (n * np.asarray(y, dtype=float) + phi.nu * m) / (n + phi.nu)


def prior_variance(spec: Family, phi: HyperParams, x):
    """Var(mu) = Q(m)/(nu - v2) under the conjugate prior."""
    spec = get_family(spec)
    if not phi.nu > spec.v2:
        raise InvalidInputError(f"need nu > v2 = {spec.v2}, got nu = {phi.nu}")
    m = _prior_mean(spec, phi, x)
    return spec.variance(m) / (phi.nu - spec.v2)


def log_norm_const(spec: Family, nu, m):
    spec = get_family(spec)
    if not np.all(np.asarray(nu) > max(0.0, spec.v2)):
        raise InvalidInputError(f"nu = {nu} outside the domain of C for {spec.family_id}")
    if not spec.in_mean_domain(m):
        raise InvalidInputError(f"mean {m} outside the mean domain of {spec.family_id}")
    return spec.log_norm_const(nu, m)


def marginal_loglik(spec: Family, y, n, phi: HyperParams, x):
    """Log marginal density of y: c(y,n) + C(nu,m) - C(n+nu, mu_tilde)."""
    spec = get_family(spec)
    m = _prior_mean(spec, phi, x)
    mu_tilde = bayes_estimate(y, n, phi, x, spec)
    return (
        spec.log_c(y, n)
        + log_norm_const(spec, phi.nu, m)
        - log_norm_const(spec, np.asarray(n, dtype=float) + phi.nu, mu_tilde)
    )


def r1(spec: Family, n, phi: HyperParams, x):
    """Leading MSE term nu*Q(m)/((n+nu)(nu-v2)); the Bayes risk of mu_tilde."""
    spec = get_family(spec)
    n = np.asarray(n, dtype=float)
    if np.any(n < 0):
        raise InvalidInputError("n must be nonnegative")
    return phi.nu * prior_variance(spec, phi, x) / (n + phi.nu)


def sample_area(spec: Family, phi: HyperParams, x, n, rng: np.random.Generator):
    """Draw (mu, y) from the two-stage model.  Deterministic given rng state."""
    spec = get_family(spec)
    m = _prior_mean(spec, phi, x)
    mu = spec.sample_prior(phi.nu, m, rng)
    y = spec.sample_data(mu, n, rng)
    return mu, y
