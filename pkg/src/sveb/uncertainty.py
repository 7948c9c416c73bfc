"""Parametric-bootstrap uncertainty machinery.

Covers four things: the naive plug-in MSE estimator, the hybrid
bootstrap MSE estimator (analytic leading term plus bootstrap bias
correction and a bootstrap estimate of the hyperparameter-estimation
term), benchmarked estimates with their excess MSE, and prediction with
MSE for areas that contributed no data.

Bootstrap replicates are driven by per-replicate child seeds spawned
from one root seed, so results do not depend on the order in which
replicates are processed.  The bandwidth is held fixed across
replicates by default; ``refit_bandwidth=True`` re-runs the full CV
selection inside every replicate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitFailureError, InvalidInputError
from .families import Family, HyperParams, get_family
from .localfit import (
    AreaArrays,
    FitOptions,
    KernelConfig,
    SvFit,
    fit_all,
    fit_local_loo,
    fit_weighted,
    kernel_matrix,
)

__all__ = [
    "BootstrapConfig",
    "BootstrapDraws",
    "MseResult",
    "ExcessMseResult",
    "NonsampledMse",
    "EstimateReport",
    "naive_mse",
    "run_bootstrap",
    "hybrid_mse",
    "benchmark_estimates",
    "excess_mse",
    "predict_nonsampled",
    "nonsampled_mse",
]


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 100
    seed: int = 0
    refit_bandwidth: bool = False

    def __post_init__(self):
        if self.B < 2:
            raise InvalidInputError(f"need B >= 2 bootstrap replicates, got {self.B}")


# ---------------------------------------------------------------------------
# Vectorized per-area quantities under an SvFit
# ---------------------------------------------------------------------------


def _fit_means(family: Family, fit: SvFit, arrs: AreaArrays) -> np.ndarray:
    """Prior mean m_i at each area's own fitted hyperparameters."""
    eta = np.einsum("ip,ip->i", fit.beta, arrs.X)
    return np.asarray(family.mean_link(eta))


def _fit_r1(family: Family, fit: SvFit, arrs: AreaArrays) -> np.ndarray:
    M = _fit_means(family, fit, arrs)
    return fit.nu * family.variance(M) / ((arrs.n + fit.nu) * (fit.nu - family.v2))


def _fit_bayes(family: Family, fit: SvFit, arrs: AreaArrays, y: np.ndarray) -> np.ndarray:
    M = _fit_means(family, fit, arrs)
    return (arrs.n * y + fit.nu * M) / (arrs.n + fit.nu)


def naive_mse(spec: Family, fit: SvFit, data) -> np.ndarray:
    """Plug-in leading term R1 at the fitted hyperparameters, per area."""
    spec = get_family(spec)
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    if not np.all(fit.nu > spec.v2):
        raise InvalidInputError("fitted nu must exceed v2 for the leading MSE term")
    return _fit_r1(spec, fit, arrs)


# ---------------------------------------------------------------------------
# Shared bootstrap engine
# ---------------------------------------------------------------------------


@dataclass
class BootstrapDraws:
    """Per-replicate arrays reused by the hybrid and excess MSE estimators."""

    y_s: np.ndarray          # (B, m) bootstrap direct estimates
    mu_s: np.ndarray         # (B, m) bootstrap truths
    mu_hat_s: np.ndarray     # (B, m) shrinkage estimate at refitted phi^s
    mu_tilde_s: np.ndarray   # (B, m) shrinkage estimate at original phi-hat
    r1_s: np.ndarray         # (B, m) leading term at refitted phi^s
    ok: np.ndarray           # (B,) replicate usable

    @property
    def n_ok(self) -> int:
        return int(self.ok.sum())


def _sample_replicate(family: Family, M: np.ndarray, nu: np.ndarray,
                      n: np.ndarray, rng: np.random.Generator):
    """Draw (mu, y) for all areas from the fitted spatially varying model."""
    if family.family_id == "gaussian":
        mu = rng.normal(M, 1.0 / np.sqrt(nu))
        y = rng.normal(mu, 1.0 / np.sqrt(n))
    elif family.family_id == "poisson_gamma":
        mu = rng.gamma(shape=nu * M, scale=1.0 / nu)
        y = rng.poisson(n * mu) / n
    else:
        mu = rng.beta(nu * M, nu * (1.0 - M))
        y = rng.binomial(np.rint(n).astype(int), mu) / n
    return mu, y


def run_bootstrap(spec: Family, fit: SvFit, data, cfg: BootstrapConfig,
                  opts: FitOptions | None = None,
                  refitter=None) -> BootstrapDraws:
    """Generate B bootstrap worlds from the fitted model and refit each.

    ``refitter(y_s, rng)`` may be supplied to replace the refitting step
    (tests use a stub returning the original fit); it must return an
    object with ``beta``, ``nu`` and ``records`` like :class:`SvFit`.
    """
    spec = get_family(spec)
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    m = arrs.m
    M_hat = _fit_means(spec, fit, arrs)
    W = kernel_matrix(arrs.U, arrs.U, KernelConfig(fit.bandwidth))

    if refitter is None and cfg.refit_bandwidth:
        def refitter(y_s, rng):
            boot = AreaArrays(ids=arrs.ids, y=y_s, n=arrs.n, X=arrs.X, U=arrs.U)
            from .bandwidth import default_search, select_bandwidth
            b_s = select_bandwidth(spec, boot, default_search(boot), opts=opts)
            return fit_all(spec, boot, KernelConfig(b_s), opts=opts, warm=None)

    B = cfg.B
    y_s = np.empty((B, m))
    mu_s = np.empty((B, m))
    mu_hat_s = np.full((B, m), np.nan)
    mu_tilde_s = np.full((B, m), np.nan)
    r1_s = np.full((B, m), np.nan)
    ok = np.zeros(B, dtype=bool)

    children = np.random.SeedSequence(cfg.seed).spawn(B)
    rngs = [np.random.Generator(np.random.Philox(c)) for c in children]
    for s in range(B):
        mu_s[s], y_s[s] = _sample_replicate(spec, M_hat, fit.nu, arrs.n, rngs[s])

    if refitter is None:
        # fixed-bandwidth default: refit all B replicates in one batched
        # call by giving every anchor its own replicate's data row
        res = fit_weighted(spec, arrs, np.tile(W, (B, 1)),
                           np.tile(fit.beta, (B, 1)), np.tile(fit.nu, B),
                           opts, Y=np.repeat(y_s, m, axis=0))
        failed = np.array([r.error is not None for r in res.records]).reshape(B, m)
        ok = ~failed.any(axis=1)
        beta_s = res.beta.reshape(B, m, -1)
        nu_s = res.nu.reshape(B, m)
        eta = np.einsum("smp,mp->sm", beta_s, arrs.X)
        M_s = np.asarray(spec.mean_link(eta))
        rows = np.where(ok)[0]
        mu_hat_s[rows] = ((arrs.n * y_s + nu_s * M_s) / (arrs.n + nu_s))[rows]
        mu_tilde_s[rows] = ((arrs.n * y_s + fit.nu * M_hat) / (arrs.n + fit.nu))[rows]
        r1_s[rows] = (nu_s * spec.variance(M_s)
                      / ((arrs.n + nu_s) * (nu_s - spec.v2)))[rows]
    else:
        for s in range(B):
            try:
                refit = refitter(y_s[s], rngs[s])
            except FitFailureError:
                continue
            if any(r.error is not None for r in refit.records):
                continue
            boot_arrs = AreaArrays(ids=arrs.ids, y=y_s[s], n=arrs.n,
                                   X=arrs.X, U=arrs.U)
            mu_hat_s[s] = _fit_bayes(spec, refit, boot_arrs, y_s[s])
            mu_tilde_s[s] = _fit_bayes(spec, fit, boot_arrs, y_s[s])
            r1_s[s] = _fit_r1(spec, refit, boot_arrs)
            ok[s] = True

    n_fail = B - int(ok.sum())
    if n_fail > 0.1 * B:
        raise FitFailureError(
            f"{n_fail}/{B} bootstrap replicates failed to refit; "
            "results would be unreliable"
        )
    return BootstrapDraws(y_s=y_s, mu_s=mu_s, mu_hat_s=mu_hat_s,
                          mu_tilde_s=mu_tilde_s, r1_s=r1_s, ok=ok)


@dataclass
class MseResult:
    """Hybrid bootstrap MSE with its term-level decomposition."""

    raw: np.ndarray              # (m,) 2*R1 - mean R1^s + R2 term
    truncated: np.ndarray        # (m,) floored at the R2 bootstrap term
    truncation_flag: np.ndarray  # (m,) bool
    r1_plugin: np.ndarray
    r1_boot_mean: np.ndarray
    r2_boot: np.ndarray
    n_dropped: int = 0

    @property
    def values(self) -> np.ndarray:
        return self.truncated


def hybrid_mse(spec: Family, fit: SvFit, data, cfg: BootstrapConfig,
               opts: FitOptions | None = None, refitter=None,
               draws: BootstrapDraws | None = None) -> MseResult:
    """Bias-corrected bootstrap MSE estimator.

    Combines 2*R1(phi-hat) - mean_s R1(phi^s) with the bootstrap
    estimate of the hyperparameter-estimation term.  Negative raw
    values are floored at the (nonnegative) bootstrap term; the raw
    value is kept alongside.
    """
    spec = get_family(spec)
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    if draws is None:
        draws = run_bootstrap(spec, fit, arrs, cfg, opts=opts, refitter=refitter)
    keep = draws.ok
    r1_hat = _fit_r1(spec, fit, arrs)
    # centered mean: exact (and exactly r1_hat) when every replicate
    # refit coincides with the original fit
    r1_bar = r1_hat + (draws.r1_s[keep] - r1_hat).mean(axis=0)
    r2 = ((draws.mu_hat_s[keep] - draws.mu_tilde_s[keep]) ** 2).mean(axis=0)
    raw = 2.0 * r1_hat - r1_bar + r2
    truncated = np.maximum(raw, r2)
    return MseResult(
        raw=raw,
        truncated=truncated,
        truncation_flag=raw < r2,
        r1_plugin=r1_hat,
        r1_boot_mean=r1_bar,
        r2_boot=r2,
        n_dropped=int((~keep).sum()),
    )


# ---------------------------------------------------------------------------
# Benchmarking
# ---------------------------------------------------------------------------


def _validate_weights(c, m):
    c = np.asarray(c, dtype=float)
    if c.shape != (m,):
        raise InvalidInputError(f"benchmark weights must have length {m}")
    if np.any(c < 0):
        raise InvalidInputError("benchmark weights must be nonnegative")
    if abs(c.sum() - 1.0) > 1e-10:
        raise InvalidInputError(f"benchmark weights must sum to 1, got {c.sum()!r}")
    return c


def benchmark_estimates(mu_hat, y, c) -> np.ndarray:
    """Adjust estimates so that sum(c * adjusted) equals sum(c * y).

    The adjustment mu_hat_i + omega_i * sum_k c_k (y_k - mu_hat_k) with
    omega_i = c_i / sum c_k^2 is the minimum-MSE constrained estimator.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    c = _validate_weights(c, len(mu_hat))
    omega = c / np.sum(c**2)
    gap = np.sum(c * (y - mu_hat))
    return mu_hat + omega * gap


@dataclass
class ExcessMseResult:
    values: np.ndarray            # (m,) raw excess MSE, may be negative
    negative_flag: np.ndarray     # (m,) bool


def excess_mse(spec: Family, fit: SvFit, data, c, cfg: BootstrapConfig,
               opts: FitOptions | None = None,
               draws: BootstrapDraws | None = None) -> ExcessMseResult:
    """Bootstrap estimate of the MSE inflation caused by benchmarking.

    Reuses the replicates from :func:`run_bootstrap` when supplied, so a
    single bootstrap pass serves both this and :func:`hybrid_mse`.
    """
    spec = get_family(spec)
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    c = _validate_weights(c, arrs.m)
    if draws is None:
        draws = run_bootstrap(spec, fit, arrs, cfg, opts=opts)
    keep = np.where(draws.ok)[0]
    omega = c / np.sum(c**2)
    diff = np.empty((len(keep), arrs.m))
    inner = np.empty((len(keep), arrs.m))
    for row, s in enumerate(keep):
        mu_hat_s = draws.mu_hat_s[s]
        mu_c_s = mu_hat_s + omega * np.sum(c * (draws.y_s[s] - mu_hat_s))
        diff[row] = mu_c_s - mu_hat_s
        inner[row] = mu_hat_s - draws.mu_tilde_s[s]
    values = (diff**2).mean(axis=0) + 2.0 * (diff * inner).mean(axis=0)
    return ExcessMseResult(values=values, negative_flag=values < 0)


# ---------------------------------------------------------------------------
# Non-sampled areas
# ---------------------------------------------------------------------------


def predict_nonsampled(spec: Family, j: int, data, cfg_kernel: KernelConfig,
                       opts: FitOptions | None = None) -> float:
    """Synthetic mean psi'(x_j' beta) from the j-excluded local fit."""
    spec = get_family(spec)
    try:
        phi = fit_local_loo(spec, j, data, cfg_kernel, opts=opts)
    except FitFailureError as exc:
        raise FitFailureError(f"prediction for area {data[j].id} failed: {exc}") from exc
    return float(spec.mean_link(float(np.dot(data[j].x, phi.beta))))


@dataclass
class NonsampledMse:
    value: float          # truncated estimate
    raw: float
    leading: float        # prior variance at the j-excluded fit
    dispersion: float     # bootstrap E[(m_hat - m)^2]
    cross: float          # bootstrap 2 E[(m_hat - m)(m - mu)]
    phi: HyperParams      # j-excluded local hyperparameters


def nonsampled_mse(spec: Family, j: int, data, cfg_kernel: KernelConfig,
                   cfg_boot: BootstrapConfig,
                   opts: FitOptions | None = None,
                   fit: SvFit | None = None,
                   repredict=None) -> NonsampledMse:
    """MSE of the non-sampled prediction for area ``j``.

    Leading term Q(m)/(nu - v2) at the j-excluded plug-in, plus bootstrap
    estimates of the regression-estimation and cross terms.  Bootstrap
    worlds redraw the truth for area ``j`` from its fitted prior and the
    sampled data from the fitted spatially varying model.
    ``repredict(y_s)`` may replace the bootstrap re-prediction (tests).
    """
    spec = get_family(spec)
    arrs = AreaArrays.from_records(data) if isinstance(data, list) else None
    if arrs is None:
        raise InvalidInputError("nonsampled_mse needs the full record list")
    rec_j = data[j]
    phi_loo = fit_local_loo(spec, j, data, cfg_kernel, opts=opts)
    m_hat = float(spec.mean_link(float(np.dot(rec_j.x, phi_loo.beta))))
    leading = spec.variance(np.asarray(m_hat)) / (phi_loo.nu - spec.v2)
    leading = float(leading)

    if fit is None:
        fit = fit_all(spec, arrs, cfg_kernel, opts=opts)
    M_fit = _fit_means(spec, fit, arrs)
    W = kernel_matrix(np.asarray(rec_j.u, dtype=float)[None, :], arrs.U,
                      cfg_kernel)
    if rec_j.sampled and rec_j.id in arrs.ids:
        W[0, arrs.ids.index(rec_j.id)] = 0.0

    B = cfg_boot.B
    m_hat_s = np.full(B, np.nan)
    mu_j_s = np.empty(B)
    ok = np.zeros(B, dtype=bool)
    y_all = np.empty((B, arrs.m))
    children = np.random.SeedSequence(cfg_boot.seed).spawn(B)
    for s in range(B):
        rng = np.random.Generator(np.random.Philox(children[s]))
        mu_j_s[s] = spec.sample_prior(phi_loo.nu, m_hat, rng)
        _, y_all[s] = _sample_replicate(spec, M_fit, fit.nu, arrs.n, rng)

    if repredict is None:
        # refit the j-anchored objective for all B replicates in one batch
        res = fit_weighted(spec, arrs, np.tile(W, (B, 1)),
                           np.tile(phi_loo.beta, (B, 1)),
                           np.full(B, phi_loo.nu), opts, Y=y_all)
        for s in range(B):
            if res.records[s].error is None:
                m_hat_s[s] = float(spec.mean_link(float(np.dot(rec_j.x, res.beta[s]))))
                ok[s] = True
    else:
        for s in range(B):
            try:
                m_hat_s[s] = repredict(y_all[s])
            except FitFailureError:
                continue
            ok[s] = True
    n_fail = B - int(ok.sum())
    if n_fail > 0.1 * B:
        raise FitFailureError(
            f"{n_fail}/{B} bootstrap re-predictions failed for area {rec_j.id}"
        )
    d = m_hat_s[ok] - m_hat
    dispersion = float(np.mean(d**2))
    cross = float(2.0 * np.mean(d * (m_hat - mu_j_s[ok])))
    raw = leading + dispersion + cross
    return NonsampledMse(
        value=max(raw, leading + dispersion),
        raw=raw,
        leading=leading,
        dispersion=dispersion,
        cross=cross,
        phi=phi_loo,
    )


# ---------------------------------------------------------------------------
# Per-area report record
# ---------------------------------------------------------------------------


@dataclass
class EstimateReport:
    """Everything the report path emits for one sampled area."""

    id: str
    y: float
    n: float
    estimate: float            # shrinkage estimate at the local fit
    naive_mse: float
    hybrid_mse: float
    hybrid_mse_raw: float
    truncated: bool
    benchmarked: float
    excess_mse: float
    beta: np.ndarray
    nu: float
    converged: bool
    boundary: bool
    meta: dict = field(default_factory=dict)
