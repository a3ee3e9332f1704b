"""Observed-data containers shared by all estimators.

A :class:`Dataset` holds, per subject, the binary treatment indicator, an
optional outcome, exactly measured covariates ``u`` and a ragged list of
replicate measurements of the error-prone covariates ``x_star`` (each subject
has ``m_i >= 1`` replicates).  Simulated datasets may additionally carry the
latent true error-prone covariates in ``x_true`` for oracle diagnostics.

Subjects keep their input row order; weights and reports are aligned to the
original row ids so results can be joined back onto the source table.
Datasets are immutable after validation and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import (
    DataValidationError,
    DimensionMismatch,
    EmptyArm,
    MissingOutcome,
    NonBinaryTreatment,
    NonFiniteValue,
)

REPLICATE_POLICIES = ("first", "second", "mean")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Validated per-subject data. Build via :func:`validate` or :meth:`from_arrays`."""

    treat: np.ndarray                      # (n,) int, 0/1
    x_star: tuple                          # n arrays, each (m_i, p1)
    u: np.ndarray                          # (n, p2)
    outcome: Optional[np.ndarray] = None   # (n,) float or None
    x_true: Optional[np.ndarray] = None    # (n, p1) latent truth (simulation only)
    ids: Optional[np.ndarray] = None       # original row ids, default 0..n-1
    x_names: Optional[tuple] = None
    u_names: Optional[tuple] = None
    intercept_flag: bool = True            # append constant column for CBPS fits

    def __post_init__(self):
        treat = np.asarray(self.treat)
        if treat.ndim != 1 or treat.size == 0:
            raise DimensionMismatch("treat must be a non-empty 1-D vector")
        if not np.isin(treat, (0, 1)).all():
            bad = treat[~np.isin(treat, (0, 1))][0]
            raise NonBinaryTreatment(f"treatment values must be 0/1, found {bad!r}")
        treat = treat.astype(np.int64)
        n = treat.size
        n1 = int(treat.sum())
        if n1 == 0 or n1 == n:
            raise EmptyArm(f"both arms must be non-empty (n1={n1}, n0={n - n1})")

        if len(self.x_star) != n:
            raise DimensionMismatch(
                f"x_star has {len(self.x_star)} subjects, treat has {n}"
            )
        reps = []
        p1 = None
        for i, xi in enumerate(self.x_star):
            xi = np.asarray(xi, dtype=np.float64)
            if xi.ndim != 2:
                raise DimensionMismatch(
                    f"subject {i}: replicates must form an (m_i, p1) array"
                )
            if p1 is None:
                p1 = xi.shape[1]
            if xi.shape[1] != p1 or xi.shape[0] < 1:
                raise DimensionMismatch(
                    f"subject {i}: replicate shape {xi.shape}, expected (m_i>=1, {p1})"
                )
            if not np.isfinite(xi).all():
                raise NonFiniteValue(f"subject {i}: non-finite replicate value")
            reps.append(_readonly(xi))
        object.__setattr__(self, "x_star", tuple(reps))

        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != n:
            raise DimensionMismatch(f"u must be (n, p2), got {u.shape}")
        if not np.isfinite(u).all():
            raise NonFiniteValue("non-finite value in u")

        if self.outcome is not None:
            y = np.asarray(self.outcome, dtype=np.float64)
            if y.shape != (n,):
                raise DimensionMismatch(f"outcome must be length {n}, got {y.shape}")
            if not np.isfinite(y).all():
                raise NonFiniteValue("non-finite outcome value")
            object.__setattr__(self, "outcome", _readonly(y))

        if self.x_true is not None:
            xt = np.asarray(self.x_true, dtype=np.float64)
            if xt.shape != (n, p1):
                raise DimensionMismatch(f"x_true must be (n, {p1}), got {xt.shape}")
            if not np.isfinite(xt).all():
                raise NonFiniteValue("non-finite value in x_true")
            object.__setattr__(self, "x_true", _readonly(xt))

        ids = self.ids if self.ids is not None else np.arange(n)
        ids = np.asarray(ids)
        if ids.shape != (n,):
            raise DimensionMismatch(f"ids must be length {n}")

        object.__setattr__(self, "treat", _readonly(treat))
        object.__setattr__(self, "u", _readonly(u))
        object.__setattr__(self, "ids", _readonly(ids))
        if self.x_names is not None and len(self.x_names) != p1:
            raise DimensionMismatch("x_names length does not match p1")
        if self.u_names is not None and len(self.u_names) != u.shape[1]:
            raise DimensionMismatch("u_names length does not match p2")

    # -- basic shape accessors -------------------------------------------------
    @property
    def n(self) -> int:
        return self.treat.size

    @property
    def n1(self) -> int:
        return int(self.treat.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def p1(self) -> int:
        return self.x_star[0].shape[1]

    @property
    def p2(self) -> int:
        return self.u.shape[1]

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    @property
    def m(self) -> np.ndarray:
        """Replicate counts m_i per subject."""
        return np.array([xi.shape[0] for xi in self.x_star])

    @property
    def treated_idx(self) -> np.ndarray:
        return np.flatnonzero(self.treat == 1)

    @property
    def control_idx(self) -> np.ndarray:
        return np.flatnonzero(self.treat == 0)

    def column_names(self) -> tuple:
        xn = self.x_names or tuple(f"x_{j + 1}" for j in range(self.p1))
        un = self.u_names or tuple(f"u_{j + 1}" for j in range(self.p2))
        return tuple(xn) + tuple(un)

    # -- covariate matrix assembly --------------------------------------------
    def x_observed(self, policy: str = "first") -> np.ndarray:
        """n x p1 matrix of observed error-prone covariates under a replicate policy."""
        if policy not in REPLICATE_POLICIES:
            raise ValueError(f"replicate_policy must be one of {REPLICATE_POLICIES}")
        rows = []
        for i, xi in enumerate(self.x_star):
            if policy == "first":
                rows.append(xi[0])
            elif policy == "second":
                rows.append(xi[1] if xi.shape[0] > 1 else xi[0])
            else:
                rows.append(xi.mean(axis=0))
        return np.asarray(rows) if self.p1 else np.empty((self.n, 0))

    def covariates(self, observed: bool = True, policy: str = "first") -> np.ndarray:
        """n x p matrix Z = [x | u], observed (x_star per policy) or latent truth."""
        if observed:
            x = self.x_observed(policy)
        else:
            if self.x_true is None:
                raise DataValidationError(
                    "true covariates requested but x_true is not set"
                )
            x = self.x_true
        return np.hstack([x, self.u])

    def outcome_required(self) -> np.ndarray:
        if self.outcome is None:
            raise MissingOutcome("this operation requires an outcome column")
        return self.outcome

    # -- constructors ----------------------------------------------------------
    @classmethod
    def from_arrays(
        cls,
        treat,
        x_star,
        u=None,
        outcome=None,
        x_true=None,
        ids=None,
        x_names=None,
        u_names=None,
        intercept_flag: bool = True,
    ) -> "Dataset":
        """Build a Dataset from in-memory arrays.

        ``x_star`` may be an (n, p1) matrix (single replicate per subject) or a
        sequence of (m_i, p1) replicate arrays.
        """
        treat = np.asarray(treat)
        n = treat.size
        if isinstance(x_star, np.ndarray) and x_star.ndim == 2:
            reps = tuple(x_star[i][None, :] for i in range(n))
        else:
            reps = tuple(np.atleast_2d(np.asarray(xi, dtype=np.float64)) for xi in x_star)
        if u is None:
            u = np.empty((n, 0))
        return cls(
            treat=treat,
            x_star=reps,
            u=np.asarray(u, dtype=np.float64),
            outcome=None if outcome is None else np.asarray(outcome, dtype=np.float64),
            x_true=None if x_true is None else np.asarray(x_true, dtype=np.float64),
            ids=ids,
            x_names=None if x_names is None else tuple(x_names),
            u_names=None if u_names is None else tuple(u_names),
            intercept_flag=intercept_flag,
        )


def validate(records: Sequence[dict]) -> Dataset:
    """Validate long-format tabular records into a Dataset.

    Each record is one replicate row with keys ``id``, ``treat``, optional
    ``outcome``, optional ``rep`` and covariate keys ``x_*`` (error prone) and
    ``u_*`` (exact).  ``treat``, ``outcome`` and ``u_*`` must be constant
    within a subject; subjects keep first-appearance order.
    """
    records = list(records)
    if not records:
        raise EmptyArm("no input rows")
    first = records[0]
    x_cols = [k for k in first.keys() if str(k).startswith("x_")]
    u_cols = [k for k in first.keys() if str(k).startswith("u_")]
    has_outcome = "outcome" in first and first["outcome"] is not None

    def _num(row, key, line):
        try:
            v = float(row[key])
        except (KeyError, TypeError, ValueError):
            raise DimensionMismatch(f"line {line}: missing or non-numeric '{key}'")
        if not np.isfinite(v):
            raise NonFiniteValue(f"line {line}: non-finite value in '{key}'")
        return v

    order = []
    per_subject: dict = {}
    for i, row in enumerate(records):
        line = i + 2  # header is line 1 in the source CSV
        if "id" not in row:
            raise DimensionMismatch(f"line {line}: missing 'id'")
        sid = row["id"]
        t = row.get("treat")
        try:
            t = int(t)
        except (TypeError, ValueError):
            raise NonBinaryTreatment(f"line {line}: treat value {t!r} is not 0/1")
        if t not in (0, 1):
            raise NonBinaryTreatment(f"line {line}: treat value {t!r} is not 0/1")
        x = [_num(row, c, line) for c in x_cols]
        uvals = [_num(row, c, line) for c in u_cols]
        y = _num(row, "outcome", line) if has_outcome else None
        if sid not in per_subject:
            order.append(sid)
            per_subject[sid] = {"treat": t, "u": uvals, "y": y, "x": [x], "line": line}
        else:
            rec = per_subject[sid]
            if rec["treat"] != t:
                raise NonBinaryTreatment(
                    f"line {line}: treat not constant within id {sid!r}"
                )
            if not np.allclose(rec["u"], uvals, rtol=0, atol=0):
                raise DimensionMismatch(
                    f"line {line}: u_* columns not constant within id {sid!r}"
                )
            if has_outcome and rec["y"] != y:
                raise DimensionMismatch(
                    f"line {line}: outcome not constant within id {sid!r}"
                )
            rec["x"].append(x)

    treat = np.array([per_subject[s]["treat"] for s in order])
    x_star = [np.asarray(per_subject[s]["x"], dtype=np.float64) for s in order]
    u = np.array([per_subject[s]["u"] for s in order], dtype=np.float64).reshape(
        len(order), len(u_cols)
    )
    outcome = (
        np.array([per_subject[s]["y"] for s in order], dtype=np.float64)
        if has_outcome
        else None
    )
    return Dataset.from_arrays(
        treat,
        x_star,
        u,
        outcome=outcome,
        ids=np.asarray(order),
        x_names=tuple(x_cols) or None,
        u_names=tuple(u_cols) or None,
    )


@dataclass(frozen=True)
class WeightVector:
    """Normalized nonnegative weights over the control subjects.

    ``control_indices`` are row positions into the owning Dataset (input
    order); ``ids`` carry the original row ids for output joins.
    """

    values: np.ndarray
    control_indices: np.ndarray
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        idx = np.asarray(self.control_indices)
        if v.shape != idx.shape:
            raise DimensionMismatch("weights and control indices differ in length")
        if not np.isfinite(v).all():
            raise NonFiniteValue("non-finite weight")
        if (v < 0).any():
            raise NonFiniteValue("negative weight")
        if abs(v.sum() - 1.0) > 1e-10:
            raise NonFiniteValue(f"weights sum to {v.sum():.12g}, expected 1")
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "control_indices", _readonly(idx))


@dataclass(frozen=True)
class BalanceFit:
    """Solution of a balancing problem: parameter, weights and solver diagnostics."""

    theta: np.ndarray
    weights: WeightVector
    converged: bool
    grad_norm: float
    iterations: int
    method: str
    objective: Optional[float] = None
    objective_path: Optional[tuple] = None


@dataclass(frozen=True)
class TreatedMoments:
    """Treated-group mean, per-covariate SD and covariance (n1 - 1 divisors)."""

    mean: np.ndarray
    sd: np.ndarray
    cov: np.ndarray
    singular: bool = False


def treated_moments(data: Dataset, use_replicate_mean: bool = False) -> TreatedMoments:
    """Treated-arm sample moments of Z used by the imbalance measures.

    The error-prone block uses the first replicate, or the per-subject
    replicate mean when ``use_replicate_mean`` is set.  The covariance is
    flagged singular when its smallest singular value is below 1e-12.
    """
    if data.n1 < 2:
        raise EmptyArm("treated moments require at least two treated subjects")
    z = data.covariates(observed=True, policy="mean" if use_replicate_mean else "first")
    zt = z[data.treated_idx]
    mean = zt.mean(axis=0)
    centered = zt - mean
    cov = centered.T @ centered / (data.n1 - 1)
    sd = np.sqrt(np.diag(cov))
    singular = bool(np.linalg.svd(cov, compute_uv=False).min() < 1e-12) if cov.size else True
    return TreatedMoments(mean=mean, sd=sd, cov=cov, singular=singular)
