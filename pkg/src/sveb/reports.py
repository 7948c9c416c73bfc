"""Report emission: delimited outputs, run manifests, and figures.

All numerics are serialized with 12 significant digits so a re-parse of
the CSV reproduces the reported values exactly.  Figures are rendered
with the Agg backend straight to files next to the CSVs; they are
diagnostics for the current run (CV profile, shrinkage, uncertainty),
not reproductions of any published plot.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "fmt",
    "write_estimates_csv",
    "write_bandwidth_csv",
    "write_predictions_csv",
    "write_simulation_csv",
    "write_table1_csv",
    "write_manifest",
    "write_error_report",
    "plot_cv_curve",
    "plot_shrinkage",
    "plot_mse",
    "plot_rd",
]

TOOL_VERSION = "0.1.0"


def fmt(v) -> str:
    """Fixed 12-significant-digit decimal serialization."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if np.isnan(v):
        return "nan"
    return f"{v:.12g}"


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([c if isinstance(c, str) else fmt(c) for c in row])


def write_estimates_csv(path, reports) -> None:
    """One row per sampled area with estimates, MSEs, and fit diagnostics."""
    if not reports:
        return
    p = len(reports[0].beta)
    header = (
        ["area_id", "y", "n", "estimate", "naive_mse", "hybrid_mse",
         "hybrid_mse_raw", "truncated", "benchmarked", "excess_mse"]
        + [f"beta{j}" for j in range(p)]
        + ["nu", "converged", "boundary"]
    )
    rows = []
    for r in reports:
        rows.append(
            [r.id, r.y, r.n, r.estimate, r.naive_mse, r.hybrid_mse,
             r.hybrid_mse_raw, r.truncated, r.benchmarked, r.excess_mse]
            + list(r.beta) + [r.nu, r.converged, r.boundary]
        )
    _write_rows(path, header, rows)


def write_bandwidth_csv(path, evaluations, b_star) -> None:
    rows = [[b, cv, ""] for b, cv in evaluations]
    rows.append([b_star, "", "selected"])
    _write_rows(path, ["bandwidth", "cv", "note"], rows)


def write_predictions_csv(path, rows) -> None:
    """rows: iterables (area_id, prediction, mse, mse_raw, leading_term)."""
    _write_rows(path, ["area_id", "prediction", "mse", "mse_raw", "leading_term"], rows)


def write_simulation_csv(path, ids, mse_sv, mse_sc, rd) -> None:
    rows = [[i, a, b, r] for i, a, b, r in zip(ids, mse_sv, mse_sc, rd)]
    _write_rows(path, ["area_id", "mse_sv", "mse_sc", "rd_percent"], rows)


def write_table1_csv(path, result) -> None:
    """Grouped RB/CV table for the hybrid and naive MSE estimators."""
    rows = []
    for j, g in enumerate(result.group_n):
        rows.append([g, result.rb_hybrid[j], result.cv_hybrid[j],
                     result.rb_naive[j], result.cv_naive[j]])
    _write_rows(path, ["n", "rb_hybrid", "cv_hybrid", "rb_naive", "cv_naive"], rows)


def write_manifest(path, config: dict) -> None:
    payload = dict(config)
    payload["tool_version"] = TOOL_VERSION
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def write_error_report(path, stage: str, exc: Exception) -> None:
    payload = {"stage": stage, "error_type": type(exc).__name__, "message": str(exc)}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    except OSError:
        pass


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_cv_curve(path, evaluations, b_star=None) -> None:
    pts = sorted((b, cv) for b, cv in evaluations if np.isfinite(cv))
    fig, ax = plt.subplots(figsize=(6, 4))
    if pts:
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", ms=4)
    if b_star is not None:
        ax.axvline(b_star, color="crimson", ls="--", lw=1,
                   label=f"selected b = {b_star:.4g}")
        ax.legend()
    ax.set_xlabel("bandwidth")
    ax.set_ylabel("CV criterion")
    ax.set_title("Cross-validation profile")
    _save(fig, path)


def plot_shrinkage(path, reports) -> None:
    y = [r.y for r in reports]
    est = [r.estimate for r in reports]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(y, est, s=18, alpha=0.8)
    lims = [min(min(y), min(est)), max(max(y), max(est))]
    ax.plot(lims, lims, color="gray", lw=1, ls=":")
    ax.set_xlabel("direct estimate")
    ax.set_ylabel("model estimate")
    ax.set_title("Shrinkage of direct estimates")
    _save(fig, path)


def plot_mse(path, reports) -> None:
    n = np.array([r.n for r in reports])
    order = np.argsort(n)
    rmse_h = np.sqrt(np.array([r.hybrid_mse for r in reports]))[order]
    rmse_n = np.sqrt(np.array([r.naive_mse for r in reports]))[order]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(n[order], rmse_h, "o", ms=4, label="hybrid bootstrap")
    ax.plot(n[order], rmse_n, "x", ms=4, label="naive plug-in")
    ax.set_xlabel("area scale n")
    ax.set_ylabel("root MSE estimate")
    ax.set_title("Uncertainty of the area estimates")
    ax.legend()
    _save(fig, path)


def plot_rd(path, rd, title="Relative difference of root MSE") -> None:
    rd = np.asarray(rd, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.axhline(0.0, color="gray", lw=1)
    ax.plot(np.arange(len(rd)), rd, "o", ms=4)
    ax.set_xlabel("area index")
    ax.set_ylabel("RD (%)")
    ax.set_title(title)
    _save(fig, path)
