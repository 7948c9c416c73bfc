"""Bandwidth selection by leave-one-out cross validation.

The CV criterion sums squared gaps between each direct estimate and the
synthetic prediction from the local fit that omits that area.  The
criterion is minimized over a data-driven interval with golden-section
search.  The upper bound follows the suggested rule b_u = 2 * max
squared pairwise distance even though it mixes units (a squared
distance bounding a distance); it is overridable everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitFailureError, InvalidInputError
from .families import Family, get_family
from .localfit import AreaArrays, FitOptions, KernelConfig, fit_all

__all__ = [
    "BandwidthSearch",
    "default_search",
    "cv_criterion",
    "golden_section",
    "select_bandwidth",
]

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0  # golden ratio conjugate ~ 0.618


@dataclass
class BandwidthSearch:
    """Search interval, tolerance, and a log of every (b, CV) evaluation."""

    lo: float = 0.01
    hi: float = 1.0
    tol: float = 1e-3
    evaluations: list = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.lo < self.hi):
            raise InvalidInputError(f"need 0 < lo < hi, got [{self.lo}, {self.hi}]")
        if not self.tol > 0:
            raise InvalidInputError(f"tol must be positive, got {self.tol}")


def default_search(data, tol_factor: float = 1e-3) -> BandwidthSearch:
    """Interval [0.01, 2 * max squared pairwise distance] with scaled tol."""
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    diff = arrs.U[:, None, :] - arrs.U[None, :, :]
    d2max = float(np.max(np.einsum("ikc,ikc->ik", diff, diff)))
    hi = max(2.0 * d2max, 0.02)
    return BandwidthSearch(lo=0.01, hi=hi, tol=tol_factor * hi)


def _cv_fit(spec: Family, arrs: AreaArrays, b: float,
            opts: FitOptions | None = None, warm=None, init=None):
    """Leave-one-out batch fit plus its CV score at bandwidth ``b``."""
    fit = fit_all(spec, arrs, KernelConfig(b), opts=opts, loo=True,
                  warm=warm, init=init)
    for i, rec in enumerate(fit.records):
        if rec.error is not None:
            raise FitFailureError(
                f"leave-one-out fit failed for area {arrs.ids[i]} at b={b:.6g}: {rec.error}"
            )
    eta = np.einsum("ip,ip->i", fit.beta, arrs.X)
    yhat = spec.mean_link(eta)
    return float(np.sum((arrs.y - yhat) ** 2)), fit


def cv_criterion(spec: Family, data, b: float,
                 opts: FitOptions | None = None) -> float:
    """Sum of squared leave-one-out prediction errors at bandwidth ``b``."""
    spec = get_family(spec)
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    return _cv_fit(spec, arrs, b, opts=opts)[0]


def golden_section(f, lo: float, hi: float, tol: float, log: list | None = None):
    """Golden-section minimization of a unimodal function on [lo, hi].

    Returns the midpoint of the final bracket.  Every evaluation is
    appended to ``log`` as ``(x, f(x))`` when a log list is supplied.
    For a non-unimodal ``f`` the result is some local minimizer.
    """
    if not lo < hi:
        raise InvalidInputError(f"need lo < hi, got [{lo}, {hi}]")

    def feval(x):
        v = f(x)
        if log is not None:
            log.append((x, v))
        return v

    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = feval(c), feval(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = feval(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = feval(d)
    return 0.5 * (a + b)


def select_bandwidth(spec: Family, data, search: BandwidthSearch | None = None,
                     opts: FitOptions | None = None) -> float:
    """Minimize the CV criterion with golden-section search.

    A bandwidth where every leave-one-out fit is infeasible scores +inf
    (logged), which steers the search back to feasible territory.
    """
    spec = get_family(spec)
    arrs = data if isinstance(data, AreaArrays) else AreaArrays.from_records(data)
    if search is None:
        search = default_search(arrs)

    # warm state shared across evaluations: the global fit is computed
    # once, and each evaluation starts from the most recent successful
    # batch fit.  The evaluation order is deterministic, so results are
    # reproducible run to run.
    state = {"warm": None, "init": None}

    def objective(b):
        try:
            cv, fit = _cv_fit(spec, arrs, b, opts=opts,
                              warm=state["warm"], init=state["init"])
        except FitFailureError:
            return math.inf
        state["warm"] = fit.constant
        state["init"] = (fit.beta, fit.nu)
        return cv

    return golden_section(objective, search.lo, search.hi, search.tol,
                          log=search.evaluations)
