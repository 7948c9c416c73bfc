"""Golden-section search and CV bandwidth selection."""

import math

import numpy as np
import pytest

from sveb.errors import FitFailureError, InvalidInputError
from sveb.families import AreaRecord, get_family
from sveb.bandwidth import (
    BandwidthSearch,
    cv_criterion,
    default_search,
    golden_section,
    select_bandwidth,
)
from sveb.localfit import AreaArrays, KernelConfig, fit_local_loo
from conftest import make_records

_RHO = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# Golden section
# ---------------------------------------------------------------------------


def test_golden_quadratic():
    log = []
    b = golden_section(lambda x: (x - 3.0) ** 2, 0.01, 10.0, 1e-6, log)
    assert abs(b - 3.0) <= 1e-6


def test_golden_nonsmooth():
    b = golden_section(lambda x: abs(x - math.e), 0.01, 10.0, 1e-8)
    assert abs(b - math.e) <= 1e-8


def test_golden_constant_terminates():
    b = golden_section(lambda x: 1.0, 0.5, 2.0, 1e-4)
    assert 0.5 <= b <= 2.0


def test_golden_eval_count_bound():
    lo, hi, tol = 0.01, 10.0, 1e-6
    log = []
    golden_section(lambda x: (x - 3.0) ** 2, lo, hi, tol, log)
    bound = math.ceil(math.log((hi - lo) / tol) / math.log(1.0 / _RHO)) + 2
    assert len(log) <= bound


def test_golden_stays_in_interval_and_shrinks():
    log = []
    golden_section(lambda x: (x - 0.3) ** 2, 0.1, 1.0, 1e-5, log)
    xs = [x for x, _ in log]
    assert min(xs) >= 0.1 and max(xs) <= 1.0


def test_golden_rejects_bad_interval():
    with pytest.raises(InvalidInputError):
        golden_section(lambda x: x, 2.0, 1.0, 1e-3)


def test_immediate_termination_with_huge_tol():
    log = []
    golden_section(lambda x: (x - 3.0) ** 2, 0.0, 10.0, 10.0, log)
    assert len(log) == 2  # only the initial bracketing evaluations


# ---------------------------------------------------------------------------
# CV criterion
# ---------------------------------------------------------------------------


def test_cv_nonnegative(family_id, rng):
    data = make_records(family_id, 12, rng)
    assert cv_criterion(family_id, data, 0.8) >= 0.0


def test_cv_matches_loop_oracle(family_id, rng):
    """Re-implementation oracle: loop areas, call the LOO fitter directly."""
    data = make_records(family_id, 10, rng)
    fam = get_family(family_id)
    b = 0.9
    got = cv_criterion(fam, data, b)
    want = 0.0
    for i, rec in enumerate(data):
        phi = fit_local_loo(fam, i, data, KernelConfig(b))
        yhat = float(fam.mean_link(np.asarray(float(rec.x @ phi.beta))))
        want += (rec.y - yhat) ** 2
    assert got == pytest.approx(want, rel=1e-4)


def test_cv_near_zero_for_noiseless_gaussian(rng):
    """Exact linear truth with tiny noise: CV is tiny at any bandwidth."""
    beta = np.array([0.4, 1.1])
    data = []
    for i in range(15):
        x = np.array([1.0, float(rng.uniform(-1, 1))])
        data.append(AreaRecord(
            id=f"g{i}", y=float(x @ beta), n=1e8,
            x=x, u=(float(rng.uniform()), float(rng.uniform()))))
    assert cv_criterion("gaussian", data, 2.0) < 1e-6


def test_cv_failure_names_area(family_id, rng):
    """One isolated area whose LOO fit is under-determined gets named."""
    data = make_records(family_id, 8, rng)
    base = data[0]
    data.append(AreaRecord(id="isolated", y=base.y, n=base.n, x=base.x,
                           u=(50.0, 50.0)))
    with pytest.raises(FitFailureError, match="isolated"):
        cv_criterion(family_id, data, 1.0)


# ---------------------------------------------------------------------------
# Search configuration and selection
# ---------------------------------------------------------------------------


def test_default_search_rule(rng):
    data = make_records("gaussian", 10, rng)
    arrs = AreaArrays.from_records(data)
    search = default_search(arrs)
    diff = arrs.U[:, None, :] - arrs.U[None, :, :]
    d2max = float(np.max(np.sum(diff**2, axis=-1)))
    assert search.lo == 0.01
    assert search.hi == pytest.approx(max(2.0 * d2max, 0.02))
    assert search.tol == pytest.approx(1e-3 * search.hi)


def test_search_validation():
    with pytest.raises(InvalidInputError):
        BandwidthSearch(lo=0.5, hi=0.4)
    with pytest.raises(InvalidInputError):
        BandwidthSearch(lo=0.1, hi=1.0, tol=0.0)


def test_select_bandwidth_deterministic(family_id, rng):
    data = make_records(family_id, 15, rng)
    arrs = AreaArrays.from_records(data)
    runs = []
    for _ in range(2):
        search = default_search(arrs, tol_factor=1e-2)
        runs.append((select_bandwidth(family_id, arrs, search),
                     tuple(search.evaluations)))
    assert runs[0] == runs[1]


def test_select_bandwidth_logs_inf_for_infeasible(rng):
    """A lo small enough that some evaluations are infeasible still works."""
    data = make_records("poisson_gamma", 12, rng)
    arrs = AreaArrays.from_records(data)
    search = BandwidthSearch(lo=1e-4, hi=3.0, tol=0.05)
    b = select_bandwidth("poisson_gamma", arrs, search)
    assert 1e-4 <= b <= 3.0
    assert len(search.evaluations) >= 2
    assert all(np.isfinite(x) or x == math.inf for _, x in search.evaluations)


def test_select_bandwidth_constant_truth_prefers_large(rng):
    """Spatially constant truth: CV should not favor tiny bandwidths."""
    from sveb.simharness import ScenarioConfig, gen_scenario

    wins = 0
    for seed in range(6):
        cfg = ScenarioConfig(family="poisson_gamma", m=40, scenario="II", seed=seed)
        recs, _, _ = gen_scenario(cfg, np.random.Generator(np.random.Philox(seed)))
        arrs = AreaArrays.from_records(recs)
        search = default_search(arrs, tol_factor=2e-2)
        b = select_bandwidth("poisson_gamma", arrs, search)
        if b > 0.5 * (search.lo + search.hi) / 2:
            wins += 1
    assert wins >= 4
