"""Locally weighted marginal likelihood fitting.

Each area gets its own hyperparameter vector, estimated by maximizing a
kernel-weighted sum of marginal log-likelihood terms anchored at that
area's coordinate.  The gaussian family uses Fisher scoring; the two
count families use EM exploiting conjugacy (the E-step expectations are
digamma differences, the M-step is a weighted gamma/beta likelihood
maximized by damped Newton in (beta, log nu)).

All fitters are implemented in batched form: one call maximizes the
objective for many anchor locations simultaneously, which is what makes
cross-validated bandwidth search and bootstrap refitting affordable.
The public single-anchor functions are thin wrappers over the batch
path, so both routes produce identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .errors import FitFailureError, InvalidInputError, RankDeficiencyError
from .families import (
    A_MIN,
    NU_MAX,
    AreaRecord,
    Family,
    HyperParams,
    get_family,
)

__all__ = [
    "KernelConfig",
    "FitOptions",
    "ConvergenceRecord",
    "SvFit",
    "AreaArrays",
    "kernel_weight",
    "kernel_matrix",
    "local_loglik",
    "local_objective",
    "fit_weighted",
    "fit_local_gaussian",
    "fit_local_pg",
    "fit_local_bb",
    "fit_local",
    "fit_all",
    "fit_constant",
    "fit_local_loo",
    "default_init",
]

NU_MIN = 1e-8  # lower drift guard on the prior precision


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel with a single fixed bandwidth."""

    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidInputError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class FitOptions:
    """Convergence tolerances shared by all family fitters."""

    obj_tol: float = 1e-8       # relative objective increment
    param_tol: float = 1e-7     # sup-norm parameter change
    max_iter: int = 500
    # One damped Newton step per M-step (a generalized EM) converges to
    # the same point as a fully solved M-step because the final polish
    # maximizes the marginal objective directly; it is much cheaper.
    inner_max_iter: int = 2
    inner_tol: float = 1e-9     # M-step gradient tolerance (scaled)


@dataclass
class ConvergenceRecord:
    iterations: int = 0
    converged: bool = False
    increment: float = np.nan   # last objective increment
    boundary: bool = False      # nu (or A) pinned at its bound
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def kernel_weight(d, cfg: KernelConfig):
    """Gaussian kernel weight exp(-d^2 / (2 b^2)) for distance d >= 0."""
    d = np.asarray(d, dtype=float)
    return np.exp(-(d**2) / (2.0 * cfg.bandwidth**2))


def kernel_matrix(anchors: np.ndarray, points: np.ndarray, cfg: KernelConfig) -> np.ndarray:
    """(n_anchor, n_point) weight matrix from pairwise Euclidean distances."""
    diff = anchors[:, None, :] - points[None, :, :]
    d2 = np.einsum("akc,akc->ak", diff, diff)
    return np.exp(-d2 / (2.0 * cfg.bandwidth**2))


# ---------------------------------------------------------------------------
# Array view of a dataset
# ---------------------------------------------------------------------------


@dataclass
class AreaArrays:
    """Column view of the sampled areas of a dataset."""

    ids: list
    y: np.ndarray       # (m,)
    n: np.ndarray       # (m,)
    X: np.ndarray       # (m, p)
    U: np.ndarray       # (m, 2)

    @property
    def m(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_records(cls, data: list[AreaRecord]) -> "AreaArrays":
        sampled = [r for r in data if r.sampled]
        if not sampled:
            raise InvalidInputError("no sampled areas in data")
        p = len(sampled[0].x)
        for r in sampled:
            if len(r.x) != p:
                raise InvalidInputError(f"area {r.id}: covariate length {len(r.x)} != {p}")
        return cls(
            ids=[r.id for r in sampled],
            y=np.array([r.y for r in sampled], dtype=float),
            n=np.array([r.n for r in sampled], dtype=float),
            X=np.array([r.x for r in sampled], dtype=float),
            U=np.array([r.u for r in sampled], dtype=float),
        )


# ---------------------------------------------------------------------------
# Batched local likelihood objective
# ---------------------------------------------------------------------------


def local_objective(family: Family, arrs: AreaArrays, W: np.ndarray,
                    beta: np.ndarray, nu: np.ndarray,
                    Y: np.ndarray | None = None) -> np.ndarray:
    """Kernel-weighted likelihood value for each anchor.

    ``W`` is (A, m); ``beta`` is (A, p); ``nu`` is (A,).  Returns (A,)
    values of sum_k W[a,k] * {C(nu_a, m_k) - C(n_k + nu_a, mu_tilde_k)}
    with -inf wherever the parameters leave the domain.  ``Y`` optionally
    replaces the shared data vector with per-anchor rows (A, m); the
    bootstrap uses that to refit many resampled datasets in one batch.
    """
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    yv = arrs.y if Y is None else Y
    eta = beta @ arrs.X.T                        # (A, m)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        M = family.mean_link(eta)
        nu_col = nu[:, None]
        mu_t = (arrs.n * yv + nu_col * M) / (arrs.n + nu_col)
        term = family.log_norm_const(nu_col, M) - family.log_norm_const(arrs.n + nu_col, mu_t)
        val = np.sum(W * term, axis=1)
    return np.where(np.isfinite(val), val, -np.inf)


def local_loglik(spec: Family, phi: HyperParams, i: int, data: list[AreaRecord],
                 cfg: KernelConfig) -> float:
    """Locally weighted log-likelihood anchored at sampled area ``i``.

    ``i`` indexes ``data``; the anchor must be a sampled area.  Terms run
    over all sampled areas (the anchor included).
    """
    spec = get_family(spec)
    if not data[i].sampled:
        raise InvalidInputError(f"anchor area {data[i].id} is not sampled")
    arrs = AreaArrays.from_records(data)
    anchor = np.asarray(data[i].u, dtype=float)[None, :]
    W = kernel_matrix(anchor, arrs.U, cfg)
    return float(local_objective(spec, arrs, W, phi.beta[None, :], np.array([phi.nu]))[0])


# ---------------------------------------------------------------------------
# Batched damped Newton used by the EM M-step
# ---------------------------------------------------------------------------


def _newton_max(value_fn, grad_fn, theta0, max_iter, tol):
    """Maximize a smooth batched objective by Newton with step halving.

    ``theta0`` is (A, d); ``value_fn(theta, idx)`` / ``grad_fn(theta, idx)``
    evaluate the rows ``idx`` of the batch at the points ``theta``.  Rows
    are dropped from the working set as soon as their gradient passes the
    tolerance or no ascent step can be found, so the per-iteration cost
    tracks the rows still moving.  The Hessian is finite-differenced from
    the analytic gradient; non-ascent directions fall back to scaled
    gradient steps.  Every accepted step does not decrease the objective.
    """
    theta_full = np.array(theta0, dtype=float)
    A, d = theta_full.shape
    idx = np.arange(A)
    val_full = value_fn(theta_full, idx)
    for _ in range(max_iter):
        if idx.size == 0:
            break
        theta = theta_full[idx]
        val = val_full[idx]
        g = grad_fn(theta, idx)
        g = np.where(np.isfinite(g), g, 0.0)
        scale = 1.0 + np.abs(val)
        live = np.max(np.abs(g), axis=1) > tol * scale
        if not live.any():
            break
        if not live.all():
            idx, theta, val, g = idx[live], theta[live], val[live], g[live]
            scale = scale[live]
        n = idx.size
        # FD Hessian columns from the analytic gradient
        H = np.empty((n, d, d))
        for j in range(d):
            h = 1e-6 * (1.0 + np.abs(theta[:, j]))
            tp = theta.copy()
            tp[:, j] += h
            gj = grad_fn(tp, idx)
            H[:, :, j] = (np.where(np.isfinite(gj), gj, 0.0) - g) / h[:, None]
        H = 0.5 * (H + H.transpose(0, 2, 1))
        try:
            step = np.linalg.solve(H, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.full_like(g, np.nan)
        bad = ~np.isfinite(step).all(axis=1)
        dots = np.einsum("ad,ad->a", np.where(bad[:, None], 0.0, step), g)
        bad |= dots <= 0
        if bad.any():
            gn = np.linalg.norm(g[bad], axis=1, keepdims=True)
            step[bad] = g[bad] / (1.0 + gn)
        # cap extravagant steps so the line search starts in sane territory
        norms = np.linalg.norm(step, axis=1)
        too_big = norms > 10.0
        if too_big.any():
            step[too_big] *= (10.0 / norms[too_big])[:, None]

        t = np.ones(n)
        accepted = np.zeros(n, dtype=bool)
        best = theta.copy()
        best_val = val.copy()
        rem = np.arange(n)
        for _half in range(30):
            cand = theta[rem] + t[rem, None] * step[rem]
            v = value_fn(cand, idx[rem])
            good = np.isfinite(v) & (v > val[rem])
            rows = rem[good]
            best[rows] = cand[good]
            best_val[rows] = v[good]
            accepted[rows] = True
            rem = rem[~good]
            if rem.size == 0:
                break
            t[rem] *= 0.5
        moved = np.max(np.abs(best - theta), axis=1)
        theta_full[idx] = best
        val_full[idx] = best_val
        # rows with no ascent step would repeat the identical failing
        # search forever; rows that barely moved are at resolution
        keep = accepted & (moved >= 1e-12)
        idx = idx[keep]
    return theta_full


# ---------------------------------------------------------------------------
# EM fitters (poisson_gamma and binomial_beta)
# ---------------------------------------------------------------------------


def _pg_mstep(arrs: AreaArrays, W, t_stat, e_stat):
    """M-step value/gradient closures for the weighted gamma likelihood."""
    X, n = arrs.X, arrs.n
    p = X.shape[1]

    def split(theta):
        return theta[:, :p], np.exp(theta[:, p])

    def value(theta, idx=None):
        W_, t_, e_ = ((W, t_stat, e_stat) if idx is None
                      else (W[idx], t_stat[idx], e_stat[idx]))
        beta, nu = split(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            M = np.exp(beta @ X.T)
            a = nu[:, None] * M
            term = a * np.log(nu)[:, None] - gammaln(a) + a * t_ - nu[:, None] * e_
            v = np.sum(W_ * term, axis=1)
        return np.where(np.isfinite(v), v, -np.inf)

    def grad(theta, idx=None):
        W_, t_, e_ = ((W, t_stat, e_stat) if idx is None
                      else (W[idx], t_stat[idx], e_stat[idx]))
        beta, nu = split(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            M = np.exp(beta @ X.T)
            nu_col = nu[:, None]
            a = nu_col * M
            c = np.log(nu)[:, None] - digamma(a) + t_
            gb = np.einsum("am,mp->ap", W_ * nu_col * c * M, X)
            dnu = np.sum(W_ * (M * c + M - e_), axis=1)
        return np.concatenate([gb, (nu * dnu)[:, None]], axis=1)

    return value, grad


def _pg_estep(arrs: AreaArrays, beta, nu, Y=None):
    z = arrs.n * (arrs.y if Y is None else Y)
    M = np.exp(beta @ arrs.X.T)
    a = z + nu[:, None] * M
    denom = arrs.n + nu[:, None]
    t_stat = digamma(a) - np.log(denom)
    e_stat = a / denom
    return t_stat, e_stat


def _bb_mstep(arrs: AreaArrays, W, s1, s0):
    """M-step value/gradient closures for the weighted beta likelihood."""
    X = arrs.X
    p = X.shape[1]

    def split(theta):
        return theta[:, :p], np.exp(theta[:, p])

    def mean(beta):
        eta = beta @ X.T
        # expit with explicit clipping keeps gammaln arguments positive
        return np.clip(1.0 / (1.0 + np.exp(-eta)), 1e-12, 1.0 - 1e-12)

    def value(theta, idx=None):
        W_, s1_, s0_ = ((W, s1, s0) if idx is None
                        else (W[idx], s1[idx], s0[idx]))
        beta, nu = split(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            M = mean(beta)
            nu_col = nu[:, None]
            a = nu_col * M
            b = nu_col * (1.0 - M)
            term = a * s1_ + b * s0_ - gammaln(a) - gammaln(b) + gammaln(nu_col)
            v = np.sum(W_ * term, axis=1)
        return np.where(np.isfinite(v), v, -np.inf)

    def grad(theta, idx=None):
        W_, s1_, s0_ = ((W, s1, s0) if idx is None
                        else (W[idx], s1[idx], s0[idx]))
        beta, nu = split(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            M = mean(beta)
            nu_col = nu[:, None]
            a = nu_col * M
            b = nu_col * (1.0 - M)
            dm = nu_col * (s1_ - s0_ - digamma(a) + digamma(b))
            gb = np.einsum("am,mp->ap", W_ * dm * M * (1.0 - M), X)
            dnu = np.sum(
                W_ * (M * s1_ + (1.0 - M) * s0_ - M * digamma(a)
                      - (1.0 - M) * digamma(b) + digamma(nu_col)),
                axis=1,
            )
        return np.concatenate([gb, (nu * dnu)[:, None]], axis=1)

    return value, grad


def _bb_estep(arrs: AreaArrays, beta, nu, Y=None):
    z = arrs.n * (arrs.y if Y is None else Y)
    eta = beta @ arrs.X.T
    M = np.clip(1.0 / (1.0 + np.exp(-eta)), 1e-12, 1.0 - 1e-12)
    a = z + nu[:, None] * M
    b = (arrs.n - z) + nu[:, None] * (1.0 - M)
    dn = digamma(arrs.n + nu[:, None])
    return digamma(a) - dn, digamma(b) - dn


# ---------------------------------------------------------------------------
# Batch drivers
# ---------------------------------------------------------------------------


@dataclass
class BatchFitResult:
    beta: np.ndarray                 # (A, p)
    nu: np.ndarray                   # (A,)
    records: list                    # ConvergenceRecord per anchor
    objective: np.ndarray            # (A,) final local likelihood values


def _guard_effective_sample(W, p):
    """Anchors whose total kernel mass cannot identify p+1 parameters."""
    return W.sum(axis=1) < p + 1


def _eq4_funcs(family: Family, arrs: AreaArrays, W, estep, mstep, p, Y=None):
    """Value and exact gradient of the weighted marginal objective.

    By Fisher's identity the gradient of the marginal objective equals
    the gradient of the M-step objective whose E-step was taken at the
    same parameter point, so the EM building blocks double as an exact
    first-order oracle for direct Newton polishing.
    """
    lnu_lo, lnu_hi = np.log(NU_MIN), np.log(NU_MAX)

    def subset(idx):
        if idx is None:
            return W, Y
        return W[idx], (None if Y is None else Y[idx])

    def value(theta, idx=None):
        W_, Y_ = subset(idx)
        lnu = theta[:, p]
        inside = (lnu >= lnu_lo - 1e-9) & (lnu <= lnu_hi + 1e-9)
        v = local_objective(family, arrs, W_, theta[:, :p],
                            np.exp(np.clip(lnu, lnu_lo, lnu_hi)), Y=Y_)
        return np.where(inside, v, -np.inf)

    def grad(theta, idx=None):
        W_, Y_ = subset(idx)
        beta = theta[:, :p]
        nu = np.exp(np.clip(theta[:, p], lnu_lo, lnu_hi))
        stats = estep(arrs, beta, nu, Y_)
        _, g = mstep(arrs, W_, *stats)
        return g(theta)

    return value, grad


def _fit_em_batch(family: Family, arrs: AreaArrays, W, beta0, nu0,
                  opts: FitOptions, Y=None) -> BatchFitResult:
    estep = _pg_estep if family.family_id == "poisson_gamma" else _bb_estep
    mstep = _pg_mstep if family.family_id == "poisson_gamma" else _bb_mstep

    A = W.shape[0]
    p = arrs.p
    beta = np.array(beta0, dtype=float).reshape(A, p)
    nu = np.clip(np.array(nu0, dtype=float).reshape(A), NU_MIN, NU_MAX)
    recs = [ConvergenceRecord() for _ in range(A)]

    under = _guard_effective_sample(W, p)
    for a in np.where(under)[0]:
        recs[a].error = (
            f"effective local sample {W[a].sum():.3g} < p+1 = {p + 1}; "
            "increase the bandwidth"
        )
    active = ~under

    obj = local_objective(family, arrs, W, beta, nu, Y=Y)
    for it in range(opts.max_iter):
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        b_a, nu_a, W_a = beta[idx], nu[idx], W[idx]
        Y_a = None if Y is None else Y[idx]
        stats = estep(arrs, b_a, nu_a, Y_a)
        value_fn, grad_fn = mstep(arrs, W_a, *stats)
        theta0 = np.concatenate([b_a, np.log(nu_a)[:, None]], axis=1)
        theta = _newton_max(value_fn, grad_fn, theta0,
                            opts.inner_max_iter, opts.inner_tol)
        lnu = np.clip(theta[:, p], np.log(NU_MIN), np.log(NU_MAX))
        at_bound = (lnu <= np.log(NU_MIN) + 1e-12) | (lnu >= np.log(NU_MAX) - 1e-12)
        beta_new, nu_new = theta[:, :p], np.exp(lnu)

        obj_new = local_objective(family, arrs, W_a, beta_new, nu_new, Y=Y_a)
        inc = obj_new - obj[idx]
        # EM guarantees ascent analytically; a numerical decrease means
        # we are at the resolution limit, so keep the old iterate.
        worse = inc < -1e-10
        beta_new[worse] = b_a[worse]
        nu_new[worse] = nu_a[worse]
        obj_new[worse] = obj[idx][worse]
        inc[worse] = 0.0

        change = np.maximum(
            np.max(np.abs(beta_new - b_a), axis=1), np.abs(np.log(nu_new) - np.log(nu_a))
        )
        # parameter change is the primary criterion (the likelihood can be
        # extremely flat in nu); a coarse stop suffices here because a
        # direct Newton polish on the marginal objective follows
        done = worse | (change < max(opts.param_tol, 1e-4)) \
            | (np.abs(inc) <= opts.obj_tol * 1e-5 * (np.abs(obj_new) + 1.0))

        beta[idx], nu[idx], obj[idx] = beta_new, nu_new, obj_new
        for j, a_idx in enumerate(idx):
            recs[a_idx].iterations = it + 1
            recs[a_idx].increment = float(inc[j])
            recs[a_idx].boundary = bool(at_bound[j]) or recs[a_idx].boundary
            if done[j]:
                recs[a_idx].converged = True
        active[idx] = ~done

    # Newton polish of the marginal objective itself; ascent-only, so the
    # EM monotonicity contract is preserved while the flat-nu direction
    # converges tightly.
    good = np.array([r.error is None for r in recs])
    if good.any():
        idx = np.where(good)[0]
        Y_g = None if Y is None else Y[idx]
        value_fn, grad_fn = _eq4_funcs(family, arrs, W[idx], estep, mstep, p, Y=Y_g)
        theta0 = np.concatenate([beta[idx], np.log(nu[idx])[:, None]], axis=1)
        theta = _newton_max(value_fn, grad_fn, theta0, 40, 1e-11)
        lnu = np.clip(theta[:, p], np.log(NU_MIN), np.log(NU_MAX))
        obj_pol = local_objective(family, arrs, W[idx], theta[:, :p], np.exp(lnu), Y=Y_g)
        better = obj_pol >= obj[idx]
        rows = idx[better]
        beta[rows] = theta[better, :p]
        nu[rows] = np.exp(lnu[better])
        obj[rows] = obj_pol[better]
        at_bound = (lnu >= np.log(NU_MAX) - 1e-9) | (lnu <= np.log(NU_MIN) + 1e-9)
        theta_fin = np.concatenate([beta[idx], np.log(nu[idx])[:, None]], axis=1)
        gfin = grad_fn(theta_fin)
        gfin[:, p][at_bound] = 0.0  # pinned direction does not count
        stationary = np.max(np.abs(gfin), axis=1) <= 1e-6 * (1.0 + np.abs(obj[idx]))
        for j, a_idx in enumerate(idx):
            if better[j]:
                recs[a_idx].boundary = bool(at_bound[j]) or recs[a_idx].boundary
            recs[a_idx].converged = bool(stationary[j])

    for a in range(A):
        if recs[a].error is not None:
            obj[a] = np.nan
    return BatchFitResult(beta=beta, nu=nu, records=recs, objective=obj)


def _fit_gaussian_batch(family: Family, arrs: AreaArrays, W, beta0, nu0,
                        opts: FitOptions, Y=None) -> BatchFitResult:
    """Fisher scoring on (beta, A) with step-halving on the A update."""
    A_anch = W.shape[0]
    p = arrs.p
    X, y = arrs.X, arrs.y
    D = 1.0 / arrs.n
    beta = np.array(beta0, dtype=float).reshape(A_anch, p)
    Avar = np.clip(1.0 / np.array(nu0, dtype=float).reshape(A_anch), A_MIN, 1.0 / NU_MIN)
    recs = [ConvergenceRecord() for _ in range(A_anch)]

    under = _guard_effective_sample(W, p)
    for a in np.where(under)[0]:
        recs[a].error = (
            f"effective local sample {W[a].sum():.3g} < p+1 = {p + 1}; "
            "increase the bandwidth"
        )
    active = ~under

    obj = local_objective(family, arrs, W, beta, 1.0 / Avar, Y=Y)
    for it in range(opts.max_iter):
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        b_a, A_a, W_a = beta[idx], Avar[idx], W[idx]
        Y_a = None if Y is None else Y[idx]
        y_a = y if Y is None else Y_a
        r = W_a / (A_a[:, None] + D)                       # (A', m)
        Mmat = np.einsum("am,mp,mq->apq", r, X, X)
        if Y is None:
            rhs = np.einsum("am,m,mp->ap", r, y, X)
        else:
            rhs = np.einsum("am,am,mp->ap", r, Y_a, X)
        try:
            beta_new = np.linalg.solve(Mmat, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            beta_new = np.empty_like(b_a)
            for j in range(idx.size):
                try:
                    beta_new[j] = np.linalg.solve(Mmat[j], rhs[j])
                except np.linalg.LinAlgError:
                    recs[idx[j]].error = "singular weighted design matrix"
                    beta_new[j] = b_a[j]
        resid = y_a - beta_new @ X.T                       # (A', m)
        denom = A_a[:, None] + D
        info = np.sum(W_a / denom**2, axis=1)
        score = np.sum(W_a * (resid**2 / denom**2 - 1.0 / denom), axis=1)
        dA = score / info

        # halve the variance step until the objective does not decrease
        step = dA.copy()
        A_new = np.maximum(A_a + step, A_MIN)
        obj_new = local_objective(family, arrs, W_a, beta_new, 1.0 / A_new, Y=Y_a)
        for _half in range(30):
            worse = obj_new < obj[idx] - 1e-12
            if not worse.any():
                break
            step[worse] *= 0.5
            A_new = np.maximum(A_a + step, A_MIN)
            obj_new = local_objective(family, arrs, W_a, beta_new, 1.0 / A_new, Y=Y_a)
        still_worse = obj_new < obj[idx] - 1e-10
        beta_new[still_worse] = b_a[still_worse]
        A_new[still_worse] = A_a[still_worse]
        obj_new[still_worse] = obj[idx][still_worse]

        inc = obj_new - obj[idx]
        change = np.maximum(np.max(np.abs(beta_new - b_a), axis=1), np.abs(A_new - A_a))
        at_floor = A_new <= A_MIN * (1 + 1e-9)
        done = still_worse | (change < opts.param_tol) \
            | (np.abs(inc) <= opts.obj_tol * 1e-5 * (np.abs(obj_new) + 1.0))

        beta[idx], Avar[idx], obj[idx] = beta_new, A_new, obj_new
        for j, a_idx in enumerate(idx):
            recs[a_idx].iterations = it + 1
            recs[a_idx].increment = float(inc[j])
            recs[a_idx].boundary = bool(at_floor[j]) or recs[a_idx].boundary
            if done[j] and recs[a_idx].error is None:
                recs[a_idx].converged = True
            if recs[a_idx].error is not None:
                done[j] = True
        active[idx] = ~done

    for a in range(A_anch):
        if recs[a].error is not None:
            obj[a] = np.nan
    return BatchFitResult(beta=beta, nu=1.0 / Avar, records=recs, objective=obj)


def fit_weighted(family: Family, arrs: AreaArrays, W: np.ndarray,
                 beta0, nu0, opts: FitOptions | None = None,
                 Y: np.ndarray | None = None) -> BatchFitResult:
    """Maximize the weighted likelihood for every row of ``W`` at once.

    ``Y`` (A, m), when given, supplies each anchor its own data vector in
    place of ``arrs.y``; the bootstrap uses this to refit every resampled
    dataset in a single batched call.
    """
    family = get_family(family)
    opts = opts or FitOptions()
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if Y is not None:
        Y = np.asarray(Y, dtype=float).reshape(W.shape)
    if family.family_id == "gaussian":
        return _fit_gaussian_batch(family, arrs, W, beta0, nu0, opts, Y=Y)
    return _fit_em_batch(family, arrs, W, beta0, nu0, opts, Y=Y)


# ---------------------------------------------------------------------------
# Initialization and public wrappers
# ---------------------------------------------------------------------------


def default_init(family: Family, arrs: AreaArrays) -> HyperParams:
    """Deterministic moment-based starting point for the global fit."""
    family = get_family(family)
    ybar = float(np.mean(arrs.y))
    m0 = float(family.clip_to_mean_domain(np.asarray(ybar)))
    beta = np.zeros(arrs.p)
    beta[0] = float(family.link_inverse(np.asarray(m0)))
    var_y = float(np.var(arrs.y))
    samp_var = float(np.mean(family.variance(np.asarray(m0)) / arrs.n))
    q0 = float(family.variance(np.asarray(m0)))
    prior_var = max(var_y - samp_var, 1e-3 * q0, 1e-12)
    nu = float(np.clip(q0 / prior_var + family.v2, 1e-2, 1e6))
    return HyperParams(beta=beta, nu=nu)


def _single_result(res: BatchFitResult, context: str) -> HyperParams:
    rec = res.records[0]
    if rec.error is not None:
        raise FitFailureError(f"{context}: {rec.error}")
    return HyperParams(beta=res.beta[0].copy(), nu=float(res.nu[0]))


def fit_constant(spec: Family, data: list[AreaRecord],
                 opts: FitOptions | None = None) -> HyperParams:
    """Global maximum likelihood over all sampled areas (uniform weights)."""
    spec = get_family(spec)
    arrs = AreaArrays.from_records(data) if isinstance(data, list) else data
    init = default_init(spec, arrs)
    W = np.ones((1, arrs.m))
    res = fit_weighted(spec, arrs, W, init.beta[None, :], np.array([init.nu]), opts)
    return _single_result(res, "global fit")


def _fit_anchor(spec: Family, anchor_u, data, cfg: KernelConfig,
                init: HyperParams | None, exclude_id=None,
                opts: FitOptions | None = None) -> HyperParams:
    arrs = AreaArrays.from_records(data) if isinstance(data, list) else data
    W = kernel_matrix(np.asarray(anchor_u, dtype=float)[None, :], arrs.U, cfg)
    if exclude_id is not None and exclude_id in arrs.ids:
        W[0, arrs.ids.index(exclude_id)] = 0.0
    if init is None:
        init = fit_constant(spec, data, opts)
    res = fit_weighted(spec, arrs, W, init.beta[None, :], np.array([init.nu]), opts)
    return _single_result(res, f"local fit at {tuple(np.asarray(anchor_u))}")


def fit_local(spec: Family, i: int, data: list[AreaRecord], cfg: KernelConfig,
              init: HyperParams | None = None,
              opts: FitOptions | None = None) -> HyperParams:
    """Maximize the local likelihood anchored at area ``i`` of ``data``."""
    return _fit_anchor(get_family(spec), data[i].u, data, cfg, init, None, opts)


def fit_local_gaussian(i, data, cfg, init=None, opts=None) -> HyperParams:
    return fit_local("gaussian", i, data, cfg, init, opts)


def fit_local_pg(i, data, cfg, init=None, opts=None) -> HyperParams:
    return fit_local("poisson_gamma", i, data, cfg, init, opts)


def fit_local_bb(i, data, cfg, init=None, opts=None) -> HyperParams:
    return fit_local("binomial_beta", i, data, cfg, init, opts)


def fit_local_loo(spec: Family, j: int, data: list[AreaRecord], cfg: KernelConfig,
                  init: HyperParams | None = None,
                  opts: FitOptions | None = None) -> HyperParams:
    """Local fit anchored at area ``j`` with area ``j``'s own term removed.

    Used by bandwidth cross-validation and by non-sampled-area
    prediction (for an unsampled ``j`` there is nothing to remove).
    """
    rec = data[j]
    return _fit_anchor(get_family(spec), rec.u, data, cfg, init,
                       exclude_id=rec.id if rec.sampled else None, opts=opts)


@dataclass
class SvFit:
    """Per-area fitted hyperparameters at one bandwidth."""

    family_id: str
    bandwidth: float
    ids: list
    beta: np.ndarray            # (m, p)
    nu: np.ndarray              # (m,)
    records: list = field(default_factory=list)
    objective: np.ndarray | None = None
    constant: HyperParams | None = None   # warm-start global fit

    def phi(self, i: int) -> HyperParams:
        return HyperParams(beta=self.beta[i].copy(), nu=float(self.nu[i]))

    def index_of(self, area_id) -> int:
        return self.ids.index(area_id)

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.records if r.error is not None)


def fit_all(spec: Family, data, cfg: KernelConfig,
            opts: FitOptions | None = None,
            warm: HyperParams | None = None,
            loo: bool = False,
            init: tuple | None = None) -> SvFit:
    """One local likelihood maximization per sampled area.

    ``loo=True`` removes each anchor's own term from its objective (all
    leave-one-out fits in a single batch); that is exactly what the
    bandwidth cross-validation needs.  ``init`` may supply per-anchor
    starting values ``(beta (m, p), nu (m,))``, e.g. the fit at a nearby
    bandwidth; otherwise every anchor starts from the global fit.
    """
    spec = get_family(spec)
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    if warm is None:
        warm = fit_constant(spec, arrs, opts)
    W = kernel_matrix(arrs.U, arrs.U, cfg)
    if loo:
        np.fill_diagonal(W, 0.0)
    if init is not None:
        beta0 = np.array(init[0], dtype=float).reshape(arrs.m, arrs.p)
        nu0 = np.array(init[1], dtype=float).reshape(arrs.m)
    else:
        beta0 = np.tile(warm.beta, (arrs.m, 1))
        nu0 = np.full(arrs.m, warm.nu)
    res = fit_weighted(spec, arrs, W, beta0, nu0, opts)
    fit = SvFit(
        family_id=spec.family_id,
        bandwidth=cfg.bandwidth,
        ids=list(arrs.ids),
        beta=res.beta,
        nu=res.nu,
        records=res.records,
        objective=res.objective,
        constant=warm,
    )
    if fit.n_failed == arrs.m:
        raise FitFailureError(
            f"all {arrs.m} local fits failed at bandwidth {cfg.bandwidth:.6g}; "
            f"first error: {res.records[0].error}"
        )
    return fit
