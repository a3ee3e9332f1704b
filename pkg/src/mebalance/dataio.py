"""CSV ingestion and emission for datasets and weight files.

Dataset CSV schema (long format, one row per replicate):

    id, treat, [outcome,] [rep,] x_1..x_k, u_1..u_j

``treat``, ``outcome`` and every ``u_*`` column must be constant within an
``id``; subjects keep first-appearance order and replicates keep file order
(``rep`` is informative).  Floats are written with 17 significant digits so a
write/read round trip reproduces the dataset bit-exactly.
"""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from .data import Dataset, WeightVector, validate
from .exceptions import DataValidationError, DimensionMismatch

_FLOAT_FMT = "%.17g"


def read_dataset_csv(path) -> Dataset:
    """Read and validate a long-format dataset CSV."""
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise DataValidationError(f"input file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as err:
        raise DataValidationError(f"cannot parse {path}: {err}")
    if "id" not in df.columns or "treat" not in df.columns:
        raise DimensionMismatch("dataset CSV needs 'id' and 'treat' columns")
    if "rep" in df.columns:
        reps = pd.to_numeric(df["rep"], errors="coerce")
        if reps.isna().any() or (reps < 1).any():
            line = int(np.flatnonzero(reps.isna() | (reps < 1))[0]) + 2
            raise DimensionMismatch(f"line {line}: 'rep' must be an integer >= 1")
        df = df.drop(columns=["rep"])
    if "outcome" in df.columns and df["outcome"].isna().all():
        df = df.drop(columns=["outcome"])
    keep = [
        c
        for c in df.columns
        if c in ("id", "treat", "outcome") or c.startswith(("x_", "u_"))
    ]
    return validate(df[keep].to_dict("records"))


def dataset_to_frame(data: Dataset) -> pd.DataFrame:
    """Long-format frame of a Dataset (inverse of :func:`read_dataset_csv`)."""
    x_names, u_names = data.column_names()[: data.p1], data.column_names()[data.p1 :]
    rows = []
    for i in range(data.n):
        xi = data.x_star[i]
        for r in range(xi.shape[0]):
            row = {"id": data.ids[i], "treat": int(data.treat[i]), "rep": r + 1}
            if data.outcome is not None:
                row["outcome"] = data.outcome[i]
            for j, name in enumerate(x_names):
                row[name] = xi[r, j]
            for j, name in enumerate(u_names):
                row[name] = data.u[i, j]
            rows.append(row)
    return pd.DataFrame(rows)


def write_dataset_csv(data: Dataset, path) -> None:
    dataset_to_frame(data).to_csv(path, index=False, float_format=_FLOAT_FMT)


def write_weights_csv(weights: WeightVector, path) -> None:
    ids = weights.ids if weights.ids is not None else weights.control_indices
    pd.DataFrame({"id": ids, "weight": weights.values}).to_csv(
        path, index=False, float_format=_FLOAT_FMT
    )


def read_weights_for(data: Dataset, path) -> WeightVector:
    """Read an (id, weight) CSV and align it to the control rows of ``data``.

    Every control subject must receive exactly one weight; the WeightVector
    invariants (nonnegative, sum 1 within 1e-10) are enforced on load.
    """
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise DataValidationError(f"weights file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as err:
        raise DataValidationError(f"cannot parse {path}: {err}")
    if "id" not in df.columns or "weight" not in df.columns:
        raise DimensionMismatch("weights CSV needs 'id' and 'weight' columns")
    lookup = {}
    for line, (sid, w) in enumerate(zip(df["id"], df["weight"]), start=2):
        if sid in lookup:
            raise DimensionMismatch(f"line {line}: duplicate weight for id {sid!r}")
        lookup[sid] = float(w)
    values = []
    for i in data.control_idx:
        sid = data.ids[i]
        if sid not in lookup:
            raise DimensionMismatch(f"no weight supplied for control id {sid!r}")
        values.append(lookup.pop(sid))
    if lookup:
        extra = next(iter(lookup))
        raise DimensionMismatch(f"weight supplied for non-control id {extra!r}")
    return WeightVector(
        values=np.asarray(values),
        control_indices=data.control_idx,
        ids=data.ids[data.control_idx],
    )
