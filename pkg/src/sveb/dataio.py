"""CSV dataset ingestion and validation.

Expected schema (UTF-8, comma-delimited, header required)::

    area_id,y,n,u1,u2,sampled,x1[,x2,...]

``sampled`` is 0/1.  Non-sampled rows may leave ``y`` and ``n`` empty.
An intercept column of ones is prepended to the covariates, so the
model's coefficient vector has length (number of x columns) + 1.
Count families additionally require ``n * y`` to be an integer (and
``<= n`` for binomial data).
"""

from __future__ import annotations

import csv

import numpy as np

from .errors import DatasetError
from .families import AreaRecord, get_family

__all__ = ["load_dataset", "standardize_coordinates"]

_REQUIRED = ["area_id", "y", "n", "u1", "u2", "sampled"]


def _parse_float(value: str, column: str, row: int) -> float:
    try:
        return float(value)
    except ValueError:
        raise DatasetError(f"row {row}: column {column!r} is not numeric: {value!r}") from None


def load_dataset(path, family=None) -> list[AreaRecord]:
    """Parse and validate a dataset CSV into area records.

    ``family`` enables the family-specific integrality checks; pass
    None to skip them (e.g. when only coordinates are needed).
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError(f"{path}: empty file, header row required")
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in _REQUIRED if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing required columns {missing}")
        xcols = sorted((c for c in header if c.startswith("x") and c[1:].isdigit()),
                       key=lambda c: int(c[1:]))
        expected = [f"x{i + 1}" for i in range(len(xcols))]
        if xcols != expected:
            raise DatasetError(f"{path}: covariate columns must be x1..xp, found {xcols}")

        fam = get_family(family) if family is not None else None
        records = []
        seen = set()
        for rownum, row in enumerate(reader, start=2):
            rid = (row.get("area_id") or "").strip()
            if not rid:
                raise DatasetError(f"row {rownum}: empty area_id")
            if rid in seen:
                raise DatasetError(f"row {rownum}: duplicate area_id {rid!r}")
            seen.add(rid)

            sampled_raw = (row.get("sampled") or "").strip()
            if sampled_raw not in ("0", "1"):
                raise DatasetError(f"row {rownum}: sampled must be 0 or 1, got {sampled_raw!r}")
            sampled = sampled_raw == "1"

            if sampled:
                y = _parse_float(row["y"], "y", rownum)
                n = _parse_float(row["n"], "n", rownum)
                if not n > 0:
                    raise DatasetError(f"row {rownum}: sampled area needs n > 0, got {n}")
            else:
                y, n = float("nan"), 0.0
                for col in ("y", "n"):
                    raw = (row.get(col) or "").strip()
                    if raw:
                        # tolerated but ignored; validate it parses
                        _parse_float(raw, col, rownum)

            u1 = _parse_float(row["u1"], "u1", rownum)
            u2 = _parse_float(row["u2"], "u2", rownum)
            x = np.ones(len(xcols) + 1)
            for j, col in enumerate(xcols, start=1):
                x[j] = _parse_float(row[col], col, rownum)

            if sampled and fam is not None and fam.family_id != "gaussian":
                z = n * y
                if abs(z - round(z)) > 1e-8 or z < -1e-8:
                    raise DatasetError(
                        f"row {rownum}: n*y = {z!r} must be a nonnegative integer "
                        f"for {fam.family_id}"
                    )
                if fam.family_id == "binomial_beta" and z > n + 1e-8:
                    raise DatasetError(f"row {rownum}: count n*y = {z!r} exceeds n = {n!r}")

            records.append(AreaRecord(id=rid, y=y, n=n, x=x, u=(u1, u2), sampled=sampled))
    if not records:
        raise DatasetError(f"{path}: no data rows")
    return records


def standardize_coordinates(records: list[AreaRecord]) -> list[AreaRecord]:
    """Z-score each coordinate axis across all areas (lon/lat-like inputs)."""
    U = np.array([r.u for r in records], dtype=float)
    mean = U.mean(axis=0)
    sd = U.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (U - mean) / sd
    return [
        AreaRecord(id=r.id, y=r.y, n=r.n, x=r.x, u=(float(z[0]), float(z[1])),
                   sampled=r.sampled)
        for r, z in zip(records, Z)
    ]
