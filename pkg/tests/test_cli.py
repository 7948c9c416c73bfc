"""Dataset ingestion, CLI pipeline, artifacts, and exit codes."""

import csv
import json

import numpy as np
import pytest

from sveb.cli import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from sveb.dataio import load_dataset, standardize_coordinates
from sveb.errors import DatasetError
from sveb.reports import fmt
from conftest import make_records


def write_csv(path, rows, header=("area_id", "y", "n", "u1", "u2", "sampled", "x1")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def records_to_csv(path, records):
    rows = []
    for r in records:
        rows.append([r.id, "" if np.isnan(r.y) else repr(r.y),
                     "" if not r.sampled else repr(r.n),
                     repr(r.u[0]), repr(r.u[1]),
                     1 if r.sampled else 0, repr(float(r.x[1]))])
    write_csv(path, rows)


# ---------------------------------------------------------------------------
# load_dataset
# ---------------------------------------------------------------------------


def test_load_wellformed(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 0.5, 10, 0.1, 0.2, 1, 0.3],
                  ["b", 0.2, 10, 0.3, 0.4, 1, -0.1]])
    recs = load_dataset(p, "binomial_beta")
    assert len(recs) == 2
    assert recs[0].x.tolist() == [1.0, 0.3]  # intercept prepended


def test_load_missing_column(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 1, 10, 0.1, 0.2, 1]],
              header=("area_id", "y", "n", "u1", "u2"))
    with pytest.raises(DatasetError, match="sampled"):
        load_dataset(p)


def test_load_nonnumeric_reports_row(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 0.5, 10, 0.1, 0.2, 1, 0.3],
                  ["b", "oops", 10, 0.3, 0.4, 1, 0.1]])
    with pytest.raises(DatasetError, match="row 3"):
        load_dataset(p)


def test_load_duplicate_id(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 0.5, 10, 0.1, 0.2, 1, 0.3],
                  ["a", 0.2, 10, 0.3, 0.4, 1, 0.1]])
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(p)


def test_load_integrality_poisson(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 0.35, 10, 0.1, 0.2, 1, 0.3]])  # z = 3.5
    with pytest.raises(DatasetError, match="row 2"):
        load_dataset(p, "poisson_gamma")


def test_load_count_exceeds_n(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 1.2, 10, 0.1, 0.2, 1, 0.3]])  # z = 12 > 10
    with pytest.raises(DatasetError, match="exceeds"):
        load_dataset(p, "binomial_beta")


def test_load_nonsampled_empty_fields(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 0.5, 10, 0.1, 0.2, 1, 0.3],
                  ["b", "", "", 0.3, 0.4, 0, 0.1]])
    recs = load_dataset(p, "poisson_gamma")
    assert not recs[1].sampled
    assert np.isnan(recs[1].y)


def test_load_bad_covariate_names(tmp_path):
    p = tmp_path / "d.csv"
    write_csv(p, [["a", 0.5, 10, 0.1, 0.2, 1, 0.3]],
              header=("area_id", "y", "n", "u1", "u2", "sampled", "x2"))
    with pytest.raises(DatasetError, match="x1"):
        load_dataset(p)


def test_standardize_coordinates(rng):
    recs = make_records("gaussian", 20, rng)
    out = standardize_coordinates(recs)
    U = np.array([r.u for r in out])
    assert np.allclose(U.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(U.std(axis=0), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# CLI pipeline
# ---------------------------------------------------------------------------


@pytest.fixture
def dataset(tmp_path, rng):
    recs = make_records("poisson_gamma", 20, rng)
    p = tmp_path / "data.csv"
    records_to_csv(p, recs)
    return p


def test_cli_fit_artifacts(dataset, tmp_path):
    out = tmp_path / "out"
    code = main(["fit", "--family", "poisson_gamma", "--input", str(dataset),
                 "--output-dir", str(out), "--bandwidth", "1.0",
                 "--no-standardize-coords"])
    assert code == EXIT_OK
    assert (out / "estimates.csv").exists()
    assert (out / "bandwidth.csv").exists()
    assert (out / "manifest.json").exists()
    assert (out / "shrinkage.png").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["bandwidth_mode"] == "fixed"
    assert manifest["tool_version"]


def test_cli_outputs_byte_identical(dataset, tmp_path):
    blobs = []
    for tag in ("r1", "r2"):
        out = tmp_path / tag
        code = main(["mse", "--family", "poisson_gamma", "--input", str(dataset),
                     "--output-dir", str(out), "--bandwidth", "1.0",
                     "--bootstrap-b", "8", "--seed", "5", "--no-figures",
                     "--no-standardize-coords"])
        assert code == EXIT_OK
        blobs.append((out / "estimates.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_cli_estimates_roundtrip(dataset, tmp_path):
    """Re-serializing the parsed CSV reproduces it byte for byte."""
    out = tmp_path / "out"
    main(["fit", "--family", "poisson_gamma", "--input", str(dataset),
          "--output-dir", str(out), "--bandwidth", "1.0", "--no-figures",
          "--no-standardize-coords"])
    with open(out / "estimates.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    for row in rows[1:]:
        for cell in row[1:]:
            if cell in ("", "0", "1"):
                continue
            assert fmt(float(cell)) == cell


def test_cli_predict(tmp_path, rng):
    recs = make_records("poisson_gamma", 15, rng)
    from sveb.families import AreaRecord
    recs.append(AreaRecord(id="new", y=float("nan"), n=0.0,
                           x=np.array([1.0, 0.2]), u=(0.5, 0.5), sampled=False))
    p = tmp_path / "data.csv"
    records_to_csv(p, recs)
    out = tmp_path / "out"
    code = main(["predict", "--family", "poisson_gamma", "--input", str(p),
                 "--output-dir", str(out), "--bandwidth", "1.0",
                 "--bootstrap-b", "8", "--no-figures", "--no-standardize-coords"])
    assert code == EXIT_OK
    with open(out / "predictions.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "area_id"
    assert rows[1][0] == "new"
    assert float(rows[1][2]) > 0


def test_cli_cv_curve(dataset, tmp_path):
    out = tmp_path / "out"
    code = main(["cv-curve", "--family", "poisson_gamma", "--input", str(dataset),
                 "--output-dir", str(out), "--grid-size", "5", "--no-figures",
                 "--no-standardize-coords"])
    assert code == EXIT_OK
    assert (out / "cv_curve.csv").exists()


def test_cli_validation_exit_code(tmp_path):
    out = tmp_path / "out"
    code = main(["fit", "--family", "poisson_gamma",
                 "--input", str(tmp_path / "missing.csv"),
                 "--output-dir", str(out)])
    assert code == EXIT_VALIDATION
    err = json.loads((out / "error.json").read_text())
    assert err["stage"] == "validation"


def test_cli_numerical_exit_code(dataset, tmp_path):
    out = tmp_path / "out"
    code = main(["fit", "--family", "poisson_gamma", "--input", str(dataset),
                 "--output-dir", str(out), "--bandwidth", "1e-6",
                 "--no-standardize-coords"])
    assert code == EXIT_NUMERICAL
    err = json.loads((out / "error.json").read_text())
    assert err["stage"] == "numerical"


def test_cli_fixed_bandwidth_excludes_search(dataset, tmp_path):
    code = main(["fit", "--family", "poisson_gamma", "--input", str(dataset),
                 "--output-dir", str(tmp_path / "o"), "--bandwidth", "1.0",
                 "--b-lo", "0.1"])
    assert code == EXIT_VALIDATION


def test_cli_config_file_flags_win(dataset, tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(
        f"family = poisson_gamma\ninput = {dataset}\n"
        "bandwidth = 0.5\nseed = 3\n# comment line\n"
    )
    out = tmp_path / "out"
    code = main(["fit", "--config", str(cfgfile), "--output-dir", str(out),
                 "--bandwidth", "1.0", "--no-figures", "--no-standardize-coords"])
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["bandwidth"] == 1.0  # the flag overrode the file


def test_cli_simulate_compare(tmp_path):
    out = tmp_path / "sim"
    code = main(["simulate", "--preset", "compare", "--family", "poisson_gamma",
                 "--scenario", "II", "--areas", "12", "--replicates", "3",
                 "--seed", "1", "--output-dir", str(out)])
    assert code == EXIT_OK
    assert (out / "simulated_mse.csv").exists()
    with open(out / "simulated_mse.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 13  # header + 12 areas


# ---------------------------------------------------------------------------
# Report formatting
# ---------------------------------------------------------------------------


def test_fmt_twelve_significant_digits():
    assert fmt(1.0 / 3.0) == "0.333333333333"
    assert float(fmt(np.pi)) == pytest.approx(np.pi, rel=1e-12)
    assert fmt(True) == "1"
    assert fmt(None) == ""
    assert fmt(7) == "7"
