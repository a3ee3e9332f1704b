"""Measurement-error distribution: MGF evaluation and replicate-based estimation.

The additive error model observes Z* = Z + eps with mean-zero eps that is
independent of the data and touches only the first p1 (error-prone)
coordinates, so the full error covariance is block diagonal diag(Sigma1, 0).
Corrections need the error MGF M(theta) = E exp(theta' eps) together with its
gradient and Hessian; both depend on theta only through the leading p1
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .data import Dataset
from .exceptions import ConfigError, MgfUndefined, NonFiniteExp, NoReplicates

EXP_CAP = 700.0  # exp() overflows just above exp(709); keep a safety margin

FAMILIES = ("normal", "uniform_symmetric", "custom")


@dataclass(frozen=True)
class ErrorModel:
    """Error variance Sigma1 plus an MGF family.

    ``sigma1`` must be symmetric positive semidefinite (the zero matrix is
    allowed and makes every correction collapse to its uncorrected
    counterpart).  The ``uniform_symmetric`` family takes independent
    per-coordinate errors on [-a_j, a_j] with a_j = sqrt(3 * sigma1[j, j]),
    so it requires a diagonal ``sigma1``.  A ``custom`` family supplies the
    scalar MGF of the p1-dimensional error plus gradient and Hessian
    callbacks as a (mgf, grad, hess) triple.
    """

    sigma1: np.ndarray
    family: str = "normal"
    custom_mgf: Optional[Tuple[Callable, Callable, Callable]] = None

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma1, dtype=np.float64))
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ConfigError(f"sigma1 must be square, got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ConfigError("sigma1 contains non-finite entries")
        if np.abs(s - s.T).max(initial=0.0) > 1e-10:
            raise ConfigError("sigma1 must be symmetric (tolerance 1e-10)")
        s = (s + s.T) / 2.0
        eig = np.linalg.eigvalsh(s) if s.size else np.array([0.0])
        if eig.min(initial=0.0) < -1e-10:
            raise ConfigError("sigma1 must be positive semidefinite")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if self.family == "custom" and self.custom_mgf is None:
            raise ConfigError("family 'custom' requires custom_mgf callbacks")
        if self.family == "uniform_symmetric" and s.shape[0] > 1:
            off = s - np.diag(np.diag(s))
            if np.abs(off).max() > 1e-10:
                raise ConfigError(
                    "uniform_symmetric assumes independent coordinates; "
                    "sigma1 must be diagonal"
                )
        s.setflags(write=False)
        object.__setattr__(self, "sigma1", s)

    @property
    def p1(self) -> int:
        return self.sigma1.shape[0]

    def sigma_full(self, p: int) -> np.ndarray:
        """Block-diagonal diag(Sigma1, 0) embedded in p x p."""
        if p < self.p1:
            raise ConfigError(f"requested dimension {p} < p1={self.p1}")
        out = np.zeros((p, p))
        out[: self.p1, : self.p1] = self.sigma1
        return out

    def is_zero(self) -> bool:
        return bool(np.abs(self.sigma1).max(initial=0.0) == 0.0)


def _uniform_1d(a: float, t: float) -> Tuple[float, float, float]:
    """MGF of Uniform[-a, a] at t with first two derivatives in t."""
    u = a * t
    if a == 0.0 or abs(u) < 1e-2:
        # series around 0 avoids 0/0 and catastrophic cancellation
        u2 = u * u
        m = 1.0 + u2 / 6.0 + u2 * u2 / 120.0
        d1 = a * (u / 3.0 + u * u2 / 30.0 + u * u2 * u2 / 840.0)
        d2 = a * a * (1.0 / 3.0 + u2 / 10.0 + u2 * u2 / 168.0)
        return m, d1, d2
    if abs(u) > EXP_CAP:
        raise NonFiniteExp(f"uniform MGF exponent {u:.3g} beyond +-{EXP_CAP:.0f}")
    sh, ch = np.sinh(u), np.cosh(u)
    m = sh / u
    d1 = (u * ch - sh) / (a * t * t)
    d2 = (u * u * sh - 2.0 * u * ch + 2.0 * sh) / (a * t ** 3)
    return m, d1, d2


def mgf(model: ErrorModel, theta: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Evaluate M(theta) = E exp(theta' eps) with gradient and Hessian.

    ``theta`` may be longer than p1 (exact covariates, intercept); only the
    leading p1 coordinates enter, and the returned gradient/Hessian carry
    exact zeros in all trailing coordinates.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size < model.p1:
        raise ConfigError(f"theta must be 1-D with at least p1={model.p1} entries")
    if not np.isfinite(theta).all():
        raise ConfigError("theta contains non-finite entries")
    p = theta.size
    tx = theta[: model.p1]
    grad = np.zeros(p)
    hess = np.zeros((p, p))

    if model.family == "normal":
        s1tx = model.sigma1 @ tx
        expo = 0.5 * float(tx @ s1tx)
        if expo > EXP_CAP:
            raise NonFiniteExp(f"normal MGF exponent {expo:.3g} beyond {EXP_CAP:.0f}")
        m = float(np.exp(expo))
        grad[: model.p1] = m * s1tx
        hess[: model.p1, : model.p1] = m * (np.outer(s1tx, s1tx) + model.sigma1)
        return m, grad, hess

    if model.family == "uniform_symmetric":
        a = np.sqrt(3.0 * np.diag(model.sigma1))
        vals = [_uniform_1d(a[j], tx[j]) for j in range(model.p1)]
        m = float(np.prod([v[0] for v in vals])) if model.p1 else 1.0
        if not np.isfinite(m) or m <= 0.0:
            raise NonFiniteExp("uniform MGF overflowed")
        ratio = np.array([v[1] / v[0] for v in vals])  # m_j'/m_j
        grad[: model.p1] = m * ratio
        hx = m * np.outer(ratio, ratio)
        for j, (mj, d1, d2) in enumerate(vals):
            hx[j, j] = m * d2 / mj
        hess[: model.p1, : model.p1] = hx
        return m, grad, hess

    f, g, h = model.custom_mgf
    m = float(f(tx))
    gx = np.asarray(g(tx), dtype=np.float64)
    hx = np.asarray(h(tx), dtype=np.float64)
    if not (np.isfinite(m) and np.isfinite(gx).all() and np.isfinite(hx).all()):
        raise MgfUndefined(f"custom MGF diverges at theta_x={tx}")
    if m <= 0.0:
        raise MgfUndefined("custom MGF returned a non-positive value")
    grad[: model.p1] = gx
    hess[: model.p1, : model.p1] = hx
    return m, grad, hess


def log_mgf_terms(model: ErrorModel, theta: np.ndarray):
    """log M with gradient and Hessian of log M (convenience for corrected losses)."""
    m, g, h = mgf(model, theta)
    grad = g / m
    hess = h / m - np.outer(grad, grad)
    return float(np.log(m)), grad, hess


def estimate_sigma(data: Dataset) -> np.ndarray:
    """Replicate-based estimate of the full p x p error covariance.

    Pools squared within-subject deviations from the per-subject replicate
    mean and divides by sum(m_i - 1).  Rows and columns of the exactly
    measured coordinates are exactly zero; the result is symmetric PSD.
    """
    dof = int((data.m - 1).sum())
    if dof < 1:
        raise NoReplicates("estimate_sigma needs at least one subject with m_i > 1")
    p1 = data.p1
    acc = np.zeros((p1, p1))
    for xi in data.x_star:
        if xi.shape[0] < 2:
            continue
        dev = xi - xi.mean(axis=0)
        acc += dev.T @ dev
    s1 = acc / dof
    s1 = (s1 + s1.T) / 2.0
    out = np.zeros((data.p, data.p))
    out[:p1, :p1] = s1
    return out


class ReplicatePairs:
    """Precomputed ordered replicate-pair differences for eta0 evaluation.

    Every subject with m_i > 1 contributes all ordered pairs j != k of
    replicate differences x*_ij - x*_ik, each scaled by 1/(m_i (m_i - 1)).
    Exact covariates cancel in the differences, so only the error-prone
    block is stored.
    """

    def __init__(self, data: Dataset):
        diffs, scales, owners = [], [], []
        n_rep = 0
        for i, xi in enumerate(data.x_star):
            mi = xi.shape[0]
            if mi < 2:
                continue
            n_rep += 1
            mask = ~np.eye(mi, dtype=bool)
            d = (xi[:, None, :] - xi[None, :, :])[mask]
            diffs.append(d)
            scales.append(np.full(d.shape[0], 1.0 / (mi * (mi - 1))))
            owners.append(np.full(d.shape[0], i))
        if n_rep == 0:
            raise NoReplicates("eta0_hat needs at least one subject with m_i > 1")
        self.diffs = np.vstack(diffs)
        self.scales = np.concatenate(scales)
        self.owners = np.concatenate(owners)
        self.n_rep = n_rep
        self.ids = data.ids
        self.p1 = data.p1

    def eta0(self, theta_x: np.ndarray) -> Tuple[float, np.ndarray]:
        """(eta0_hat, d eta0_hat / d theta_x) at theta_x."""
        expo = self.diffs @ theta_x
        if np.abs(expo).max(initial=0.0) > EXP_CAP:
            bad = int(np.argmax(np.abs(expo)))
            sid = self.ids[self.owners[bad]]
            raise NonFiniteExp(
                f"replicate-difference exponent overflow for subject {sid!r}",
                subject_id=sid,
            )
        e = np.exp(expo) * self.scales
        s = e.sum() / self.n_rep
        grad_x = e @ self.diffs / self.n_rep
        eta0 = float(np.sqrt(s))
        return eta0, grad_x / (2.0 * eta0)


def eta0_hat(theta: np.ndarray, data: Dataset) -> Tuple[float, np.ndarray]:
    """Pairwise-difference estimate of eta0(theta) = E exp(theta' eps) under
    symmetric errors, with its analytic gradient.

    eta0_hat is the square root of the xi-weighted average over subjects of
    the mean of exp(theta'(Z*_ij - Z*_ik)) over ordered replicate pairs
    j != k; subjects with a single replicate contribute nothing.  The
    gradient differentiates through the square root.  Exact covariates
    cancel in every replicate difference, so the gradient is exactly zero in
    the trailing p2 coordinates.
    """
    theta = np.asarray(theta, dtype=np.float64)
    pairs = ReplicatePairs(data)
    eta0, grad_x = pairs.eta0(theta[: data.p1])
    eta1 = np.zeros(theta.size)
    eta1[: data.p1] = grad_x
    return eta0, eta1
