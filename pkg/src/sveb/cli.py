"""Command-line front end.

Subcommands mirror the analysis stages: ``fit`` (local likelihood fits
and shrinkage estimates), ``mse`` (adds hybrid bootstrap MSE),
``benchmark`` (adds constrained estimates and excess MSE), ``predict``
(non-sampled areas), ``cv-curve`` (CV profile over a bandwidth grid),
and ``simulate`` (the replication studies).

Options can come from a flat key=value config file (``--config``);
command-line flags win over the file.  Exit codes: 0 ok, 2 validation
failure, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import reports
from .bandwidth import BandwidthSearch, cv_criterion, default_search, select_bandwidth
from .dataio import load_dataset, standardize_coordinates
from .errors import DatasetError, FitFailureError, InvalidInputError, RankDeficiencyError
from .families import get_family
from .localfit import AreaArrays, FitOptions, KernelConfig, fit_all
from .simharness import (
    BootstrapConfig,
    ScenarioConfig,
    rb_cv_study,
    relative_difference,
    simulate_mse,
)
from .uncertainty import (
    EstimateReport,
    _fit_bayes,
    benchmark_estimates,
    excess_mse,
    hybrid_mse,
    naive_mse,
    nonsampled_mse,
    predict_nonsampled,
    run_bootstrap,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


@dataclass
class RunConfig:
    family: str = "poisson_gamma"
    input: str = ""
    output_dir: str = "sveb_out"
    standardize_coords: bool = True
    bandwidth: float | None = None      # fixed bandwidth; None selects by CV
    b_lo: float | None = None
    b_hi: float | None = None
    b_tol: float | None = None
    bootstrap_b: int = 100
    seed: int = 0
    weights: str = "default_n"          # default_n | none | a covariate column name
    figures: bool = True
    stages: set = field(default_factory=lambda: {"fit"})

    def validate(self):
        if not self.input:
            raise InvalidInputError("an input dataset is required (--input)")
        if self.bandwidth is not None and any(
            v is not None for v in (self.b_lo, self.b_hi, self.b_tol)
        ):
            raise InvalidInputError(
                "--bandwidth (fixed) excludes the search overrides --b-lo/--b-hi/--b-tol"
            )


def _read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


_CONFIG_TYPES = {
    "family": str, "input": str, "output_dir": str,
    "standardize_coords": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "bandwidth": float, "b_lo": float, "b_hi": float, "b_tol": float,
    "bootstrap_b": int, "seed": int, "weights": str,
    "figures": lambda s: s.lower() in ("1", "true", "yes", "on"),
}


def _merge_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, raw in _read_config_file(args.config).items():
            if key not in _CONFIG_TYPES:
                raise InvalidInputError(f"unknown config key {key!r}")
            setattr(cfg, key, _CONFIG_TYPES[key](raw))
    for key in _CONFIG_TYPES:
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if getattr(args, "no_standardize_coords", False):
        cfg.standardize_coords = False
    if getattr(args, "no_figures", False):
        cfg.figures = False
    return cfg


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _make_search(cfg: RunConfig, arrs) -> BandwidthSearch:
    base = default_search(arrs)
    return BandwidthSearch(
        lo=cfg.b_lo if cfg.b_lo is not None else base.lo,
        hi=cfg.b_hi if cfg.b_hi is not None else base.hi,
        tol=cfg.b_tol if cfg.b_tol is not None else base.tol,
    )


def _benchmark_weights(cfg: RunConfig, records, arrs):
    if cfg.weights == "none":
        return None
    if cfg.weights == "default_n":
        return arrs.n / arrs.n.sum()
    # a covariate column: x1..xp map to intercept-shifted indices
    if cfg.weights.startswith("x") and cfg.weights[1:].isdigit():
        j = int(cfg.weights[1:])
        c = np.array([r.x[j] for r in records if r.sampled], dtype=float)
        return c / c.sum()
    raise InvalidInputError(f"unknown benchmark weights {cfg.weights!r}")


def run(cfg: RunConfig) -> int:
    """Execute the requested stages and write all artifacts."""
    cfg.validate()
    family = get_family(cfg.family)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    records = load_dataset(cfg.input, family=cfg.family)
    if cfg.standardize_coords:
        records = standardize_coordinates(records)
    arrs = AreaArrays.from_records(records)
    opts = FitOptions()

    search = None
    if cfg.bandwidth is not None:
        b_star = cfg.bandwidth
    else:
        search = _make_search(cfg, arrs)
        b_star = select_bandwidth(family, arrs, search, opts=opts)
    fit = fit_all(family, arrs, KernelConfig(b_star), opts=opts)

    estimates = _fit_bayes(family, fit, arrs, arrs.y)
    naive = naive_mse(family, fit, arrs)

    hybrid = None
    excess = None
    benchmarked = None
    weights = _benchmark_weights(cfg, records, arrs)
    if {"mse", "benchmark"} & cfg.stages:
        boot = BootstrapConfig(B=cfg.bootstrap_b, seed=cfg.seed)
        draws = run_bootstrap(family, fit, arrs, boot, opts=opts)
        hybrid = hybrid_mse(family, fit, arrs, boot, opts=opts, draws=draws)
        if "benchmark" in cfg.stages and weights is not None:
            benchmarked = benchmark_estimates(estimates, arrs.y, weights)
            excess = excess_mse(family, fit, arrs, weights, boot, opts=opts, draws=draws)
    if "benchmark" in cfg.stages and weights is not None and benchmarked is None:
        benchmarked = benchmark_estimates(estimates, arrs.y, weights)

    area_reports = []
    for i in range(arrs.m):
        rec = fit.records[i]
        area_reports.append(EstimateReport(
            id=arrs.ids[i],
            y=float(arrs.y[i]),
            n=float(arrs.n[i]),
            estimate=float(estimates[i]),
            naive_mse=float(naive[i]),
            hybrid_mse=float(hybrid.truncated[i]) if hybrid is not None else float("nan"),
            hybrid_mse_raw=float(hybrid.raw[i]) if hybrid is not None else float("nan"),
            truncated=bool(hybrid.truncation_flag[i]) if hybrid is not None else False,
            benchmarked=float(benchmarked[i]) if benchmarked is not None else float("nan"),
            excess_mse=float(excess.values[i]) if excess is not None else float("nan"),
            beta=fit.beta[i],
            nu=float(fit.nu[i]),
            converged=rec.converged,
            boundary=rec.boundary,
        ))

    reports.write_estimates_csv(outdir / "estimates.csv", area_reports)
    reports.write_bandwidth_csv(
        outdir / "bandwidth.csv",
        search.evaluations if search is not None else [],
        b_star,
    )

    prediction_rows = []
    if "predict" in cfg.stages:
        kcfg = KernelConfig(b_star)
        boot = BootstrapConfig(B=cfg.bootstrap_b, seed=cfg.seed)
        for j, rec in enumerate(records):
            if rec.sampled:
                continue
            pred = predict_nonsampled(family, j, records, kcfg, opts=opts)
            ns = nonsampled_mse(family, j, records, kcfg, boot, opts=opts, fit=fit)
            prediction_rows.append([rec.id, pred, ns.value, ns.raw, ns.leading])
        reports.write_predictions_csv(outdir / "predictions.csv", prediction_rows)

    reports.write_manifest(outdir / "manifest.json", {
        "command": sorted(cfg.stages),
        "family": cfg.family,
        "input": str(cfg.input),
        "standardize_coords": cfg.standardize_coords,
        "bandwidth": b_star,
        "bandwidth_mode": "fixed" if cfg.bandwidth is not None else "auto",
        "search": None if search is None else
            {"lo": search.lo, "hi": search.hi, "tol": search.tol},
        "bootstrap_b": cfg.bootstrap_b,
        "seed": cfg.seed,
        "weights": cfg.weights,
        "n_areas": len(records),
        "n_sampled": arrs.m,
    })

    if cfg.figures:
        if search is not None:
            reports.plot_cv_curve(outdir / "cv_curve.png", search.evaluations, b_star)
        reports.plot_shrinkage(outdir / "shrinkage.png", area_reports)
        if hybrid is not None:
            reports.plot_mse(outdir / "mse.png", area_reports)
    return EXIT_OK


def run_cv_curve(cfg: RunConfig, grid_size: int) -> int:
    cfg.validate()
    family = get_family(cfg.family)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    records = load_dataset(cfg.input, family=cfg.family)
    if cfg.standardize_coords:
        records = standardize_coordinates(records)
    arrs = AreaArrays.from_records(records)
    search = _make_search(cfg, arrs)
    grid = np.geomspace(search.lo, search.hi, grid_size)
    evals = []
    for b in grid:
        try:
            evals.append((float(b), cv_criterion(family, arrs, float(b))))
        except FitFailureError:
            evals.append((float(b), float("inf")))
    finite = [(b, v) for b, v in evals if np.isfinite(v)]
    b_best = min(finite, key=lambda t: t[1])[0] if finite else float("nan")
    reports.write_bandwidth_csv(outdir / "cv_curve.csv", evals, b_best)
    reports.write_manifest(outdir / "manifest.json", {
        "command": ["cv-curve"], "family": cfg.family, "input": str(cfg.input),
        "grid_size": grid_size, "lo": search.lo, "hi": search.hi,
        "standardize_coords": cfg.standardize_coords,
    })
    if cfg.figures:
        reports.plot_cv_curve(outdir / "cv_curve.png", evals, b_best)
    return EXIT_OK


def run_simulate(args) -> int:
    outdir = Path(args.output_dir or "sveb_sim")
    outdir.mkdir(parents=True, exist_ok=True)
    if args.preset == "table1":
        cfg = ScenarioConfig(family=args.family, m=50,
                             n_pattern=(10.0, 15.0, 20.0, 25.0, 30.0),
                             scenario="I", nu_multiplier=30.0,
                             R=args.replicates, seed=args.seed)
        result = rb_cv_study(cfg, BootstrapConfig(B=args.bootstrap_b, seed=args.seed),
                             S=args.iterations)
        reports.write_table1_csv(outdir / "table1.csv", result)
        manifest = {"command": ["simulate"], "preset": "table1",
                    "family": args.family, "R": cfg.R, "S": args.iterations,
                    "B": args.bootstrap_b, "seed": args.seed}
    else:
        k = args.nonsampled if args.preset == "nonsampled" else 0
        cfg = ScenarioConfig(family=args.family, m=args.areas, k=k,
                             scenario=args.scenario, R=args.replicates,
                             seed=args.seed)
        sv = simulate_mse(cfg, "SV")
        sc = simulate_mse(cfg, "SC")
        rd = relative_difference(sv.mse, sc.mse)
        reports.write_simulation_csv(outdir / "simulated_mse.csv",
                                     sv.ids, sv.mse, sc.mse, rd)
        if args.figures:
            reports.plot_rd(outdir / "rd.png", rd)
        manifest = {"command": ["simulate"], "preset": args.preset,
                    "family": args.family, "scenario": args.scenario,
                    "m": cfg.m, "k": cfg.k, "R": cfg.R, "seed": args.seed}
    reports.write_manifest(outdir / "manifest.json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(sp):
    sp.add_argument("--config", help="flat key=value config file; flags win")
    sp.add_argument("--family", choices=["gaussian", "poisson_gamma", "binomial_beta"])
    sp.add_argument("--input", help="dataset CSV")
    sp.add_argument("--output-dir", dest="output_dir")
    sp.add_argument("--bandwidth", type=float, help="fixed bandwidth (skips CV)")
    sp.add_argument("--b-lo", dest="b_lo", type=float)
    sp.add_argument("--b-hi", dest="b_hi", type=float)
    sp.add_argument("--b-tol", dest="b_tol", type=float)
    sp.add_argument("--bootstrap-b", dest="bootstrap_b", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--weights", help="default_n, none, or a covariate column (x1..)")
    sp.add_argument("--no-standardize-coords", action="store_true",
                    help="use coordinates as given (default standardizes per axis)")
    sp.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sveb",
        description="Spatially varying empirical Bayes small area estimation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("fit", "local fits and shrinkage estimates"),
        ("mse", "fit plus hybrid bootstrap MSE"),
        ("benchmark", "fit, MSE, benchmarked estimates, excess MSE"),
        ("predict", "fit plus non-sampled-area predictions with MSE"),
    ]:
        sp = sub.add_parser(name, help=help_)
        _add_common(sp)

    sp = sub.add_parser("cv-curve", help="CV criterion over a bandwidth grid")
    _add_common(sp)
    sp.add_argument("--grid-size", dest="grid_size", type=int, default=25)

    sp = sub.add_parser("simulate", help="replication studies")
    sp.add_argument("--preset", choices=["compare", "nonsampled", "table1"],
                    default="compare")
    sp.add_argument("--family", default="poisson_gamma",
                    choices=["gaussian", "poisson_gamma", "binomial_beta"])
    sp.add_argument("--scenario", choices=["I", "II"], default="I")
    sp.add_argument("--areas", type=int, default=60)
    sp.add_argument("--nonsampled", type=int, default=20)
    sp.add_argument("--replicates", type=int, default=200)
    sp.add_argument("--iterations", type=int, default=100,
                    help="estimation iterations for the table1 preset")
    sp.add_argument("--bootstrap-b", dest="bootstrap_b", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output-dir", dest="output_dir")
    sp.add_argument("--figures", action="store_true", default=True)
    return parser


_STAGES = {
    "fit": {"fit"},
    "mse": {"fit", "mse"},
    "benchmark": {"fit", "mse", "benchmark"},
    "predict": {"fit", "predict"},
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    outdir = getattr(args, "output_dir", None)
    try:
        if args.command == "simulate":
            return run_simulate(args)
        cfg = _merge_config(args)
        if args.command == "cv-curve":
            return run_cv_curve(cfg, args.grid_size)
        cfg.stages = _STAGES[args.command]
        return run(cfg)
    except (DatasetError, InvalidInputError) as exc:
        _report_failure(outdir, "validation", exc)
        return EXIT_VALIDATION
    except (FitFailureError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        _report_failure(outdir, "numerical", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        _report_failure(outdir, "io", exc)
        return EXIT_IO


def _report_failure(outdir, stage, exc):
    print(f"error [{stage}]: {exc}", file=sys.stderr)
    if outdir:
        try:
            Path(outdir).mkdir(parents=True, exist_ok=True)
            reports.write_error_report(Path(outdir) / "error.json", stage, exc)
        except OSError:
            pass


if __name__ == "__main__":
    sys.exit(main())
