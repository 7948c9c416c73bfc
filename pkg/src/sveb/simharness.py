"""Simulation harness: scenario generators and replication studies.

Regenerates the experimental designs used to evaluate the spatially
varying (SV) estimator against the spatially constant (SC) baseline:

* sampled-area MSE comparison on unit-square coordinates with a single
  uniform covariate, under a spatially varying truth (scenario I) and a
  constant truth (scenario II);
* the same comparison for non-sampled areas predicted from covariates;
* the relative bias / coefficient-of-variation study of the naive and
  hybrid MSE estimators with grouped area scales.

Coordinates and covariates are drawn once per study and held fixed
across replicates (per-area MSE is area-indexed); ``redraw_design``
flips that.  Everything is seeded through ``numpy.random.SeedSequence``
spawning so replicate order never matters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitFailureError, InvalidInputError
from .families import AreaRecord, Family, get_family
from .localfit import AreaArrays, FitOptions, KernelConfig, fit_all, fit_constant, fit_weighted, kernel_matrix
from .bandwidth import BandwidthSearch, default_search, select_bandwidth
from .uncertainty import BootstrapConfig, _fit_bayes, hybrid_mse, naive_mse, run_bootstrap

__all__ = [
    "ScenarioConfig",
    "SimResult",
    "RbCvResult",
    "gen_scenario",
    "simulate_mse",
    "relative_difference",
    "rb_cv_metrics",
    "rb_cv_study",
]


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation design.

    ``n_pattern`` is either a constant scale for every sampled area or a
    tuple of group values split evenly over the areas.  In scenario I
    the prior precision surface is ``mult * exp(u1 + u2 - 1)`` where
    ``mult`` is the area's own n when ``nu_multiplier`` is None (the
    sampled-area design) or the given constant (the grouped design).
    """

    family: str = "poisson_gamma"
    m: int = 60
    k: int = 0
    n_pattern: object = 20.0
    scenario: str = "I"
    R: int = 200
    seed: int = 0
    nu_multiplier: float | None = None

    def __post_init__(self):
        if self.scenario not in ("I", "II"):
            raise InvalidInputError(f"scenario must be 'I' or 'II', got {self.scenario!r}")
        if self.m < 3:
            raise InvalidInputError("need at least 3 sampled areas")
        if self.R < 1:
            raise InvalidInputError("need R >= 1 replicates")


def _n_values(cfg: ScenarioConfig) -> np.ndarray:
    if np.isscalar(cfg.n_pattern):
        return np.full(cfg.m, float(cfg.n_pattern))
    groups = np.asarray(cfg.n_pattern, dtype=float)
    if cfg.m % len(groups) != 0:
        raise InvalidInputError(
            f"m = {cfg.m} not divisible into {len(groups)} equal groups"
        )
    return np.repeat(groups, cfg.m // len(groups))


def _surfaces(cfg: ScenarioConfig, U: np.ndarray, n: np.ndarray):
    """True hyperparameter fields (beta0, beta1, nu) at each location."""
    if cfg.scenario == "I":
        beta0 = U[:, 0] - U[:, 1] - 1.0
        beta1 = np.sqrt(U[:, 0] ** 2 + U[:, 1] ** 2)
        if cfg.nu_multiplier is None:
            # non-sampled areas have no scale of their own; the precision
            # surface extends with the mean sampled-area scale (a constant
            # n pattern leaves this equal to that constant)
            mult = np.where(np.isfinite(n), n, np.nanmean(n))
        else:
            mult = float(cfg.nu_multiplier)
        nu = mult * np.exp(U[:, 0] + U[:, 1] - 1.0)
    else:
        beta0 = np.full(len(U), 0.1)
        beta1 = np.full(len(U), 0.7)
        nu = np.full(len(U), 50.0)
    return beta0, beta1, nu


@dataclass
class ScenarioDesign:
    """Fixed part of a study: locations, covariates, scales, surfaces."""

    cfg: ScenarioConfig
    U: np.ndarray           # (m+k, 2)
    x: np.ndarray           # (m+k,)
    n: np.ndarray           # (m+k,) scale; defined for sampled areas
    beta0: np.ndarray
    beta1: np.ndarray
    nu: np.ndarray
    prior_mean: np.ndarray  # (m+k,)

    @property
    def X(self) -> np.ndarray:
        return np.column_stack([np.ones(len(self.x)), self.x])


def make_design(cfg: ScenarioConfig, rng: np.random.Generator) -> ScenarioDesign:
    total = cfg.m + cfg.k
    U = rng.uniform(0.0, 1.0, size=(total, 2))
    x = rng.uniform(-1.0, 1.0, size=total)
    n = np.empty(total)
    n[: cfg.m] = _n_values(cfg)
    n[cfg.m:] = np.nan
    beta0, beta1, nu = _surfaces(cfg, U, n)
    fam = get_family(cfg.family)
    prior_mean = np.asarray(fam.mean_link(beta0 + beta1 * x))
    return ScenarioDesign(cfg=cfg, U=U, x=x, n=n, beta0=beta0, beta1=beta1,
                          nu=nu, prior_mean=prior_mean)


def draw_population(design: ScenarioDesign, rng: np.random.Generator):
    """Draw truths for every area and data for the sampled ones."""
    cfg = design.cfg
    fam = get_family(cfg.family)
    mu = np.asarray(fam.sample_prior(design.nu, design.prior_mean, rng))
    y = np.full(cfg.m + cfg.k, np.nan)
    sl = slice(0, cfg.m)
    y[sl] = fam.sample_data(mu[sl], design.n[sl], rng)
    return mu, y


def gen_scenario(cfg: ScenarioConfig, rng: np.random.Generator):
    """One dataset plus the true area means.

    Returns ``(records, mu_true, design)``: the record list has the
    ``m`` sampled areas first and ``k`` non-sampled areas after them.
    """
    design = make_design(cfg, rng)
    mu, y = draw_population(design, rng)
    records = []
    for i in range(cfg.m + cfg.k):
        sampled = i < cfg.m
        records.append(AreaRecord(
            id=f"area{i:03d}",
            y=float(y[i]) if sampled else float("nan"),
            n=float(design.n[i]) if sampled else 0.0,
            x=np.array([1.0, design.x[i]]),
            u=(float(design.U[i, 0]), float(design.U[i, 1])),
            sampled=sampled,
        ))
    return records, mu, design


# ---------------------------------------------------------------------------
# Method runners (array level, for speed inside replication loops)
# ---------------------------------------------------------------------------


def _sampled_arrays(design: ScenarioDesign, y: np.ndarray) -> AreaArrays:
    m = design.cfg.m
    return AreaArrays(
        ids=[f"area{i:03d}" for i in range(m)],
        y=y[:m].copy(),
        n=design.n[:m],
        X=design.X[:m],
        U=design.U[:m],
    )


def _sv_estimates(family: Family, design: ScenarioDesign, arrs: AreaArrays,
                  opts: FitOptions, tol_factor: float):
    """SV pipeline: CV bandwidth, local fits, shrinkage estimates.

    Returns (sampled estimates, non-sampled predictions, bandwidth).
    """
    cfg = design.cfg
    search = default_search(arrs, tol_factor=tol_factor)
    b = select_bandwidth(family, arrs, search, opts=opts)
    fit = fit_all(family, arrs, KernelConfig(b), opts=opts)
    if fit.n_failed:
        raise FitFailureError("SV replicate had failed local fits")
    est = _fit_bayes(family, fit, arrs, arrs.y)
    pred = None
    if cfg.k > 0:
        W = kernel_matrix(design.U[cfg.m:], arrs.U, KernelConfig(b))
        beta0 = np.tile(fit.constant.beta, (cfg.k, 1))
        nu0 = np.full(cfg.k, fit.constant.nu)
        res = fit_weighted(family, arrs, W, beta0, nu0, opts)
        if any(r.error is not None for r in res.records):
            raise FitFailureError("SV non-sampled prediction fit failed")
        eta = np.einsum("ip,ip->i", res.beta, design.X[cfg.m:])
        pred = np.asarray(family.mean_link(eta))
    return est, pred, b


def _sc_estimates(family: Family, design: ScenarioDesign, arrs: AreaArrays,
                  opts: FitOptions):
    cfg = design.cfg
    phi = fit_constant(family, arrs, opts)
    M = np.asarray(family.mean_link(design.X @ phi.beta))
    est = (arrs.n * arrs.y + phi.nu * M[: cfg.m]) / (arrs.n + phi.nu)
    pred = M[cfg.m:] if cfg.k > 0 else None
    return est, pred


@dataclass
class SimResult:
    """Per-area simulated MSE for one method."""

    method: str
    ids: list
    mse: np.ndarray
    n_replicates: int
    n_dropped: int
    bandwidths: list = field(default_factory=list)


def simulate_mse(cfg: ScenarioConfig, method: str = "SV",
                 estimator=None,
                 opts: FitOptions | None = None,
                 tol_factor: float = 1e-2,
                 redraw_design: bool = False) -> SimResult:
    """Monte-Carlo area-level MSE of a method under a scenario.

    For ``k == 0`` the target areas are the sampled ones (shrinkage
    estimates); for ``k > 0`` they are the non-sampled ones (synthetic
    predictions).  ``estimator(arrs, design, mu, rng)`` may replace the
    built-in methods; it must return the per-target-area estimates.
    """
    if method not in ("SV", "SC") and estimator is None:
        raise InvalidInputError(f"method must be 'SV' or 'SC', got {method!r}")
    family = get_family(cfg.family)
    opts = opts or FitOptions()
    root = np.random.SeedSequence(cfg.seed)
    design_ss, rep_ss = root.spawn(2)
    design = make_design(cfg, np.random.Generator(np.random.Philox(design_ss)))
    children = rep_ss.spawn(cfg.R)

    target = slice(0, cfg.m) if cfg.k == 0 else slice(cfg.m, cfg.m + cfg.k)
    n_target = cfg.m if cfg.k == 0 else cfg.k
    sq_sum = np.zeros(n_target)
    used = 0
    dropped = 0
    bandwidths = []
    for r in range(cfg.R):
        rng = np.random.Generator(np.random.Philox(children[r]))
        local_design = design if not redraw_design else make_design(cfg, rng)
        mu, y = draw_population(local_design, rng)
        arrs = _sampled_arrays(local_design, y)
        try:
            if estimator is not None:
                est = np.asarray(estimator(arrs, local_design, mu, rng))
            elif method == "SV":
                est_s, pred, b = _sv_estimates(family, local_design, arrs,
                                               opts, tol_factor)
                bandwidths.append(b)
                est = est_s if cfg.k == 0 else pred
            else:
                est_s, pred = _sc_estimates(family, local_design, arrs, opts)
                est = est_s if cfg.k == 0 else pred
        except FitFailureError:
            dropped += 1
            continue
        sq_sum += (est - mu[target]) ** 2
        used += 1
    if dropped > 0.1 * cfg.R:
        raise FitFailureError(f"{dropped}/{cfg.R} replicates failed; study aborted")
    ids = [f"area{i:03d}" for i in range(cfg.m + cfg.k)][target]
    return SimResult(method=method if estimator is None else "custom",
                     ids=ids, mse=sq_sum / used, n_replicates=used,
                     n_dropped=dropped, bandwidths=bandwidths)


def relative_difference(mse_sv, mse_sc) -> np.ndarray:
    """Percent relative difference of root MSE: 100*(rmse_sv/rmse_sc - 1)."""
    mse_sv = np.asarray(mse_sv, dtype=float)
    mse_sc = np.asarray(mse_sc, dtype=float)
    if np.any(mse_sv < 0) or np.any(mse_sc < 0):
        raise InvalidInputError("MSE inputs must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        rd = 100.0 * (np.sqrt(mse_sv) - np.sqrt(mse_sc)) / np.sqrt(mse_sc)
    return np.where(mse_sc > 0, rd, np.nan)


# ---------------------------------------------------------------------------
# RB / CV study of the MSE estimators
# ---------------------------------------------------------------------------


def rb_cv_metrics(estimates: np.ndarray, true_mse: np.ndarray):
    """Percent relative bias and coefficient of variation per area.

    ``estimates`` is (S, m); both metrics are relative to ``true_mse``
    and scaled to percent.
    """
    rel = (np.asarray(estimates) - true_mse) / true_mse
    rb = 100.0 * rel.mean(axis=0)
    cv = 100.0 * np.sqrt((rel**2).mean(axis=0))
    return rb, cv


@dataclass
class RbCvResult:
    group_n: np.ndarray
    rb_hybrid: np.ndarray
    cv_hybrid: np.ndarray
    rb_naive: np.ndarray
    cv_naive: np.ndarray
    true_mse: np.ndarray
    rb_hybrid_area: np.ndarray
    rb_naive_area: np.ndarray


def _group_means(values: np.ndarray, n: np.ndarray, group_n: np.ndarray):
    return np.array([values[n == g].mean() for g in group_n])


def rb_cv_study(cfg: ScenarioConfig, boot_cfg: BootstrapConfig,
                S: int = 100,
                opts: FitOptions | None = None,
                tol_factor: float = 1e-2) -> RbCvResult:
    """Two-level study of the naive and hybrid MSE estimators.

    First simulates per-area true MSE of the SV estimator over ``cfg.R``
    replicates, then runs ``S`` estimation iterations; each one fits the
    model to fresh data and produces both MSE estimates.  Metrics are
    averaged within groups of equal area scale n.
    """
    family = get_family(cfg.family)
    opts = opts or FitOptions()
    root = np.random.SeedSequence(cfg.seed)
    design_ss, truth_ss, est_ss = root.spawn(3)
    design = make_design(cfg, np.random.Generator(np.random.Philox(design_ss)))
    m = cfg.m

    # Stage 1: the simulated truth MSE (SV full procedure per replicate)
    truth_children = truth_ss.spawn(cfg.R)
    sq_sum = np.zeros(m)
    used = 0
    for r in range(cfg.R):
        rng = np.random.Generator(np.random.Philox(truth_children[r]))
        mu, y = draw_population(design, rng)
        arrs = _sampled_arrays(design, y)
        try:
            est, _, _ = _sv_estimates(family, design, arrs, opts, tol_factor)
        except FitFailureError:
            continue
        sq_sum += (est - mu[:m]) ** 2
        used += 1
    if used < 0.9 * cfg.R:
        raise FitFailureError("too many failed replicates in the truth stage")
    true_mse = sq_sum / used

    # Stage 2: S estimation iterations producing both MSE estimates
    est_children = est_ss.spawn(S)
    hybrid_est = np.full((S, m), np.nan)
    naive_est = np.full((S, m), np.nan)
    ok = np.zeros(S, dtype=bool)
    for s in range(S):
        rng = np.random.Generator(np.random.Philox(est_children[s]))
        mu, y = draw_population(design, rng)
        arrs = _sampled_arrays(design, y)
        try:
            search = default_search(arrs, tol_factor=tol_factor)
            b = select_bandwidth(family, arrs, search, opts=opts)
            fit = fit_all(family, arrs, KernelConfig(b), opts=opts)
            if fit.n_failed:
                continue
            naive_est[s] = naive_mse(family, fit, arrs)
            boot_s = BootstrapConfig(
                B=boot_cfg.B,
                seed=int(np.random.SeedSequence((boot_cfg.seed, s)).generate_state(1)[0]),
                refit_bandwidth=boot_cfg.refit_bandwidth,
            )
            hybrid_est[s] = hybrid_mse(family, fit, arrs, boot_s, opts=opts).values
        except FitFailureError:
            continue
        ok[s] = True
    if ok.sum() < 0.9 * S:
        raise FitFailureError("too many failed iterations in the estimation stage")

    rb_h, cv_h = rb_cv_metrics(hybrid_est[ok], true_mse)
    rb_n, cv_n = rb_cv_metrics(naive_est[ok], true_mse)
    n = design.n[:m]
    group_n = np.unique(_n_values(cfg))
    return RbCvResult(
        group_n=group_n,
        rb_hybrid=_group_means(rb_h, n, group_n),
        cv_hybrid=_group_means(cv_h, n, group_n),
        rb_naive=_group_means(rb_n, n, group_n),
        cv_naive=_group_means(cv_n, n, group_n),
        true_mse=true_mse,
        rb_hybrid_area=rb_h,
        rb_naive_area=rb_n,
    )
