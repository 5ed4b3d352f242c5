"""CSV reading and writing for cohorts, samples and metric tables."""

from __future__ import annotations

import csv
import math

import numpy as np

from .cohort import Cohort, TwoPhaseSample
from .errors import MaskingError, ParameterError, SchemaError


def fmt(value) -> str:
    """17 significant digits; NaN and None become empty fields."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else format(float(value), ".17g")
    return str(value)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([fmt(v) for v in row])


def read_table(path) -> tuple:
    """Header and list of row dicts."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        return list(reader.fieldnames), list(reader)


def _require_columns(header, names, path):
    missing = [c for c in names if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}", violations=[f"$.columns: {c}" for c in missing])


def _float_column(rows, name, allow_empty=False):
    out = np.empty(len(rows))
    for i, row in enumerate(rows):
        cell = row[name].strip()
        if cell == "":
            if not allow_empty:
                raise ParameterError(f"row {i + 1}: column {name!r} is empty")
            out[i] = np.nan
            continue
        try:
            out[i] = float(cell)
        except ValueError:
            raise ParameterError(f"row {i + 1}: column {name!r} value {cell!r} is not numeric") from None
    return out


def _row_list(rows_idx, limit=10):
    text = ", ".join(str(i + 1) for i in rows_idx[:limit])
    return text + (" ..." if len(rows_idx) > limit else "")


def write_cohort_csv(path, cohort: Cohort, sample: TwoPhaseSample) -> dict:
    """Write error-prone data for everyone and truth for validated rows.

    Returns the column mapping that reads the file back.
    """
    p, q = cohort.p, cohort.q
    xs = [f"x_star{j + 1}" for j in range(p)]
    xt = [f"x{j + 1}" for j in range(p)]
    zs = [f"z{j + 1}" for j in range(q)]
    header = ["id", *xs, *zs, "u_star", "delta_star", *xt, "u", "delta", "r", "pi"]
    masked = cohort.masked(sample)
    rows = []
    for i in range(cohort.n_subjects):
        rows.append([
            cohort.ids[i], *cohort.x[i], *cohort.z[i], cohort.u_star[i], int(cohort.delta_star[i]),
            *masked.x_true[i], masked.u_true[i],
            None if np.isnan(masked.delta_true[i]) else int(masked.delta_true[i]),
            int(sample.r[i]), sample.pi[i],
        ])
    write_rows(path, header, rows)
    return {"id": "id", "x_star": xs, "z": zs, "u_star": "u_star", "delta_star": "delta_star",
            "x": xt, "u": "u", "delta": "delta", "r": "r"}


def read_cohort_csv(path, mapping: dict, pi_column: str = None) -> tuple:
    """Read a two-phase data file.

    Returns
    -------
    cohort : Cohort
        Truth columns are NaN for unvalidated rows.
    r : ndarray of int8
    pi : ndarray or None
        Inclusion probabilities when ``pi_column`` is given.

    Raises
    ------
    MaskingError
        Validated rows lack truth cells, or unvalidated rows carry an
        unparseable truth cell; row numbers are 1-based data rows.
    ParameterError
        Inclusion probabilities outside (0, 1].
    """
    header, rows = read_table(path)
    z_cols = mapping.get("z", [])
    truth_cols = [*mapping["x"], mapping["u"], mapping["delta"]]
    needed = [*mapping["x_star"], *z_cols, mapping["u_star"], mapping["delta_star"], *truth_cols, mapping["r"]]
    if "id" in mapping:
        needed.append(mapping["id"])
    if pi_column is not None:
        needed.append(pi_column)
    _require_columns(header, needed, path)
    if not rows:
        raise ParameterError(f"{path}: no data rows")

    r = _float_column(rows, mapping["r"])
    bad = np.flatnonzero((r != 0) & (r != 1))
    if bad.size:
        raise ParameterError(f"{path}: r must be 0 or 1 (rows {_row_list(bad)})")
    r = r.astype(np.int8)

    x_star = np.column_stack([_float_column(rows, c) for c in mapping["x_star"]])
    z = (np.column_stack([_float_column(rows, c) for c in z_cols]) if z_cols
         else np.zeros((len(rows), 0)))
    truth = {c: _float_column(rows, c, allow_empty=True) for c in truth_cols}
    present = np.all(np.column_stack([np.isfinite(truth[c]) for c in truth_cols]), axis=1)
    lacking = np.flatnonzero((r == 1) & ~present)
    if lacking.size:
        raise MaskingError(f"{path}: validated rows lack truth columns (rows {_row_list(lacking)})")

    pi = None
    if pi_column is not None:
        pi = _float_column(rows, pi_column)
        out = np.flatnonzero(~((pi > 0) & (pi <= 1)))
        if out.size:
            raise ParameterError(f"{path}: inclusion probabilities must lie in (0, 1] (rows {_row_list(out)})")

    ids = np.array([row[mapping["id"]] for row in rows]) if "id" in mapping else None
    x_true = np.column_stack([truth[c] for c in mapping["x"]])
    cohort = Cohort(
        x_star, z, _float_column(rows, mapping["u_star"]), _float_column(rows, mapping["delta_star"]),
        x_true, truth[mapping["u"]], truth[mapping["delta"]], ids,
    )
    return cohort, r, pi
