"""Local likelihood fitting: oracles, reductions, and invariances."""

import math

import numpy as np
import pytest

from sveb.errors import FitFailureError
from sveb.families import A_MIN, AreaRecord, HyperParams, get_family, marginal_loglik
from sveb.localfit import (
    AreaArrays,
    FitOptions,
    KernelConfig,
    default_init,
    fit_all,
    fit_constant,
    fit_local,
    fit_local_loo,
    fit_weighted,
    kernel_matrix,
    kernel_weight,
    local_loglik,
    local_objective,
)
from conftest import make_records


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def test_kernel_weight_values():
    cfg = KernelConfig(0.7)
    assert kernel_weight(0.0, cfg) == 1.0
    assert kernel_weight(0.7, cfg) == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert kernel_weight(1.0, KernelConfig(1e9)) == pytest.approx(1.0, abs=1e-12)


def test_kernel_matrix_matches_scalar():
    rng = np.random.Generator(np.random.Philox(1))
    A = rng.uniform(0, 1, size=(4, 2))
    P = rng.uniform(0, 1, size=(7, 2))
    cfg = KernelConfig(0.3)
    W = kernel_matrix(A, P, cfg)
    for i in range(4):
        for k in range(7):
            d = np.linalg.norm(A[i] - P[k])
            assert W[i, k] == pytest.approx(float(kernel_weight(d, cfg)), rel=1e-12)


def test_kernel_config_rejects_nonpositive():
    with pytest.raises(Exception):
        KernelConfig(0.0)


# ---------------------------------------------------------------------------
# Local objective
# ---------------------------------------------------------------------------


def test_local_loglik_term_by_term_oracle(family_id, rng):
    """Direct recomputation: kernel weight times normalizer difference."""
    data = make_records(family_id, 8, rng)
    fam = get_family(family_id)
    phi = HyperParams(beta=np.array([0.1, 0.2]), nu=5.0)
    cfg = KernelConfig(0.4)
    got = local_loglik(fam, phi, 2, data, cfg)
    want = 0.0
    anchor = np.asarray(data[2].u)
    for rec in data:
        w = float(kernel_weight(np.linalg.norm(anchor - np.asarray(rec.u)), cfg))
        full = float(marginal_loglik(fam, rec.y, rec.n, phi, rec.x))
        c_term = float(fam.log_c(rec.y, rec.n))
        want += w * (full - c_term)
    assert got == pytest.approx(want, rel=1e-10)


def test_local_loglik_single_area(family_id, rng):
    data = make_records(family_id, 1, rng)
    fam = get_family(family_id)
    phi = HyperParams(beta=np.array([0.0, 0.1]), nu=3.0)
    got = local_loglik(fam, phi, 0, data, KernelConfig(1.0))
    rec = data[0]
    want = float(marginal_loglik(fam, rec.y, rec.n, phi, rec.x)) - float(fam.log_c(rec.y, rec.n))
    assert got == pytest.approx(want, rel=1e-12)


def test_local_loglik_flat_kernel_is_full_likelihood(family_id, rng):
    data = make_records(family_id, 6, rng)
    fam = get_family(family_id)
    phi = HyperParams(beta=np.array([0.05, -0.1]), nu=8.0)
    got = local_loglik(fam, phi, 0, data, KernelConfig(1e8))
    want = sum(
        float(marginal_loglik(fam, r.y, r.n, phi, r.x)) - float(fam.log_c(r.y, r.n))
        for r in data
    )
    assert got == pytest.approx(want, rel=1e-9)


# ---------------------------------------------------------------------------
# Fitters: ascent, reductions, analytic cases
# ---------------------------------------------------------------------------


def test_fitters_ascend_from_init(family_id, rng):
    data = make_records(family_id, 15, rng)
    arrs = AreaArrays.from_records(data)
    cfg = KernelConfig(0.6)
    init = default_init(family_id, arrs)
    W = kernel_matrix(arrs.U, arrs.U, cfg)
    res = fit_weighted(family_id, arrs, W,
                       np.tile(init.beta, (arrs.m, 1)), np.full(arrs.m, init.nu))
    v_init = local_objective(get_family(family_id), arrs, W,
                             np.tile(init.beta, (arrs.m, 1)), np.full(arrs.m, init.nu))
    v_out = local_objective(get_family(family_id), arrs, W, res.beta, res.nu)
    assert np.all(v_out >= v_init - 1e-9)


def test_uniform_weight_reduction(family_id, rng):
    data = make_records(family_id, 30, rng)
    arrs = AreaArrays.from_records(data)
    dmax = np.sqrt(np.max(np.sum(
        (arrs.U[:, None, :] - arrs.U[None, :, :]) ** 2, axis=-1)))
    const = fit_constant(family_id, data)
    fit = fit_all(family_id, arrs, KernelConfig(1e6 * dmax))
    assert np.max(np.abs(fit.beta - const.beta)) < 1e-5
    assert np.max(np.abs(fit.nu - const.nu)) < 1e-5 * max(1.0, const.nu)


def test_gaussian_boundary_analytic():
    """Intercept-only, y=(0,2), D=1, uniform weights: beta=1, A floored."""
    data = [
        AreaRecord(id="a", y=0.0, n=1.0, x=np.array([1.0]), u=(0.0, 0.0)),
        AreaRecord(id="b", y=2.0, n=1.0, x=np.array([1.0]), u=(0.1, 0.1)),
    ]
    fit = fit_all("gaussian", data, KernelConfig(1e9))
    assert np.allclose(fit.beta, 1.0, atol=1e-8)
    assert np.allclose(1.0 / fit.nu, A_MIN, rtol=1e-6)
    assert all(r.boundary for r in fit.records)


def test_gaussian_balanced_fh_analytic(rng):
    """Equal D, intercept-only: ML is beta=ybar, A=second moment - D."""
    D = 0.5
    y = rng.normal(1.0, 1.5, size=40)
    data = [
        AreaRecord(id=f"a{i}", y=float(y[i]), n=1.0 / D, x=np.array([1.0]),
                   u=(float(rng.uniform()), float(rng.uniform())))
        for i in range(40)
    ]
    phi = fit_constant("gaussian", data)
    ybar = y.mean()
    a_ml = max(A_MIN, float(np.mean((y - ybar) ** 2)) - D)
    assert phi.beta[0] == pytest.approx(ybar, abs=1e-7)
    assert 1.0 / phi.nu == pytest.approx(a_ml, rel=1e-5)


def test_fit_constant_duplicate_invariance(family_id, rng):
    data = make_records(family_id, 12, rng)
    phi1 = fit_constant(family_id, data)
    doubled = data + [
        AreaRecord(id=r.id + "x", y=r.y, n=r.n, x=r.x, u=r.u) for r in data
    ]
    phi2 = fit_constant(family_id, doubled)
    assert np.allclose(phi1.beta, phi2.beta, atol=1e-6)
    assert phi1.nu == pytest.approx(phi2.nu, rel=1e-5)


# ---------------------------------------------------------------------------
# Grid oracle
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_grid_oracle_local_fit(family_id, rng):
    """The fitter's objective beats the best of a dense parameter grid."""
    data = make_records(family_id, 6, rng)
    arrs = AreaArrays.from_records(data)
    fam = get_family(family_id)
    cfg = KernelConfig(2.0)
    W = kernel_matrix(arrs.U[:1], arrs.U, cfg)

    g = 60
    b0 = np.linspace(-2.5, 2.5, g)
    b1 = np.linspace(-2.5, 2.5, g)
    lnu = np.linspace(-2.0, 5.0, g)
    B0, B1, L = np.meshgrid(b0, b1, lnu, indexing="ij")
    beta_grid = np.column_stack([B0.ravel(), B1.ravel()])
    nu_grid = np.exp(L.ravel())
    vals = local_objective(fam, arrs, np.tile(W, (len(nu_grid), 1)),
                           beta_grid, nu_grid)
    best = float(np.max(vals))

    phi = fit_local(fam, 0, data, cfg)
    got = float(local_objective(fam, arrs, W, phi.beta[None, :],
                                np.array([phi.nu]))[0])
    slack = 0.05  # generous bound on the grid resolution error
    assert got >= best - slack


# ---------------------------------------------------------------------------
# Leave-one-out and invariances
# ---------------------------------------------------------------------------


def test_loo_equals_explicit_exclusion(family_id, rng):
    data = make_records(family_id, 12, rng)
    cfg = KernelConfig(0.8)
    j = 3
    phi_loo = fit_local_loo(family_id, j, data, cfg)
    masked = list(data)
    rec = data[j]
    masked[j] = AreaRecord(id=rec.id, y=float("nan"), n=0.0, x=rec.x,
                           u=rec.u, sampled=False)
    phi_masked = fit_local_loo(family_id, j, masked, cfg)
    assert np.allclose(phi_loo.beta, phi_masked.beta, atol=1e-7)
    assert phi_loo.nu == pytest.approx(phi_masked.nu, rel=1e-6)


def test_fit_all_loo_matches_single_loo(family_id, rng):
    """Batch LOO fits and one-at-a-time LOO fits find the same optimum.

    Compared on the objective scale: when the local data show no
    overdispersion the likelihood is flat in nu and the maximizing nu is
    only identified up to that flat region.
    """
    data = make_records(family_id, 10, rng)
    arrs = AreaArrays.from_records(data)
    fam = get_family(family_id)
    cfg = KernelConfig(0.8)
    fit = fit_all(family_id, arrs, cfg, loo=True)
    for j in (0, 4, 9):
        phi = fit_local_loo(family_id, j, data, cfg)
        W = kernel_matrix(arrs.U[j:j + 1], arrs.U, cfg)
        W[0, j] = 0.0
        v_batch = float(local_objective(fam, arrs, W, fit.beta[j][None, :],
                                        np.array([fit.nu[j]]))[0])
        v_single = float(local_objective(fam, arrs, W, phi.beta[None, :],
                                         np.array([phi.nu]))[0])
        assert v_batch == pytest.approx(v_single, abs=1e-5 * (1 + abs(v_single)))
        eta_b = float(fit.beta[j] @ arrs.X[j])
        eta_s = float(phi.beta @ arrs.X[j])
        assert fam.mean_link(np.asarray(eta_b)) == pytest.approx(
            float(fam.mean_link(np.asarray(eta_s))), abs=1e-5)


def test_fit_all_permutation_invariance(family_id, rng):
    data = make_records(family_id, 12, rng)
    cfg = KernelConfig(0.7)
    fit1 = fit_all(family_id, data, cfg)
    perm = [7, 2, 11, 0, 5, 9, 1, 10, 3, 8, 4, 6]
    fit2 = fit_all(family_id, [data[i] for i in perm], cfg)
    for new_pos, old_pos in enumerate(perm):
        assert np.allclose(fit2.beta[new_pos], fit1.beta[old_pos], atol=1e-7)
        assert fit2.nu[new_pos] == pytest.approx(fit1.nu[old_pos], rel=1e-6)


def test_weight_locality(family_id, rng):
    """A point whose weight is already < 1e-8 barely matters at 2x distance."""
    data = make_records(family_id, 10, rng)
    far = AreaRecord(id="far", y=data[0].y, n=data[0].n, x=data[0].x,
                     u=(60.0, 60.0))
    farther = AreaRecord(id="far", y=far.y, n=far.n, x=far.x, u=(120.0, 120.0))
    cfg = KernelConfig(5.0)
    anchor = np.asarray(data[0].u)
    w = float(kernel_weight(np.linalg.norm(anchor - np.asarray(far.u)), cfg))
    assert w < 1e-8
    phi1 = fit_local(family_id, 0, data + [far], cfg)
    phi2 = fit_local(family_id, 0, data + [farther], cfg)
    assert np.max(np.abs(phi1.beta - phi2.beta)) < 1e-3
    assert abs(math.log(phi1.nu) - math.log(phi2.nu)) < 1e-3


def test_effective_sample_guard(family_id, rng):
    """Tiny bandwidth: every anchor is under-determined and flagged."""
    data = make_records(family_id, 8, rng)
    with pytest.raises(FitFailureError, match="increase the bandwidth"):
        fit_all(family_id, data, KernelConfig(1e-4))


def test_convergence_records_present(family_id, rng):
    data = make_records(family_id, 12, rng)
    fit = fit_all(family_id, data, KernelConfig(0.8))
    assert len(fit.records) == 12
    assert all(r.converged for r in fit.records)
    assert fit.n_failed == 0
