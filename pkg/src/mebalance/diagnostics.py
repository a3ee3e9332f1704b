"""Imbalance measures, their large-sample limits, and naive-bias predictors.

ASMD is the absolute gap between the treated covariate mean and the weighted
control mean, scaled by the treated-group SD; MD is the Mahalanobis length
of the gap vector under the treated covariance.  Evaluated on the true
covariates with naive weights these measures do not vanish: their
large-sample limits are driven by the error MGF, and the attenuation of the
naive dual parameter admits an explicit matrix bias formula under normal
errors (invertible, which is what the one-shot bias correction exploits).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .correction import corrected_dual_hessian
from .data import Dataset, WeightVector
from .error_model import ErrorModel, mgf
from .exceptions import SingularCorrection

_SV_TOL = 1e-12


@dataclass(frozen=True)
class ImbalanceReport:
    """Per-covariate ASMD and the scalar MD for one set of weights.

    ``asmd`` entries are NaN for coordinates with zero treated SD; ``md`` is
    NaN when the treated covariance is singular (``singular_treated_cov``).
    """

    asmd: np.ndarray
    md: float
    basis: str
    weights_source: str
    singular_treated_cov: bool = False

    @property
    def max_asmd(self) -> float:
        finite = self.asmd[np.isfinite(self.asmd)]
        return float(finite.max()) if finite.size else float("nan")


def imbalance(
    weights: WeightVector,
    covariates: np.ndarray,
    data: Dataset,
    basis: str = "observed_covariates",
    weights_source: str = "",
) -> ImbalanceReport:
    """ASMD and MD of the weighted control group against the treated group.

    ``covariates`` is the n x p basis on which imbalance is evaluated (pass
    the true covariates to measure residual imbalance of latent X).  Treated
    moments use the n1 - 1 divisor.
    """
    z = np.asarray(covariates, dtype=np.float64)
    if z.shape[0] != data.n:
        raise ValueError(f"covariates must have {data.n} rows, got {z.shape[0]}")
    zt = z[data.treated_idx]
    zbar = zt.mean(axis=0)
    centered = zt - zbar
    cov = centered.T @ centered / (data.n1 - 1)
    sd = np.sqrt(np.diag(cov))
    gap = zbar - weights.values @ z[weights.control_indices]

    asmd = np.full(z.shape[1], np.nan)
    ok = sd > 0.0
    asmd[ok] = np.abs(gap[ok]) / sd[ok]

    singular = bool(np.linalg.svd(cov, compute_uv=False).min() < _SV_TOL)
    if singular:
        md = float("nan")
    else:
        md = float(np.sqrt(gap @ np.linalg.solve(cov, gap)))
    return ImbalanceReport(
        asmd=asmd,
        md=md,
        basis=basis,
        weights_source=weights_source,
        singular_treated_cov=singular,
    )


def _inv_sqrt(mat: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Symmetric inverse square root with an eigenvalue floor."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.maximum(vals, floor)
    return (vecs / np.sqrt(vals)) @ vecs.T


def asymptotic_imbalance(
    theta_star: np.ndarray,
    model: ErrorModel,
    treated_sd: np.ndarray,
    treated_cov: np.ndarray,
) -> Tuple[np.ndarray, float]:
    """Large-sample limits of the naive-weight imbalance measures.

    ASMD limit per coordinate j <= p1 is |grad M(theta*)_j| / (M(theta*)
    sd_j); exactly measured coordinates have limit exactly 0.  The MD limit
    is the Euclidean length of inv_sqrt(treated_cov) grad M / M.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    m, grad, _ = mgf(model, theta_star)
    g = grad / m
    sd = np.asarray(treated_sd, dtype=np.float64)
    limits = np.zeros(theta_star.size)
    p1 = model.p1
    limits[:p1] = np.abs(g[:p1]) / sd[:p1]
    md_limit = float(np.linalg.norm(_inv_sqrt(np.asarray(treated_cov)) @ g))
    return limits, md_limit


@dataclass(frozen=True)
class NaiveBiasPrediction:
    """Inverted-bias-formula reconstruction of theta0 from a naive fit."""

    theta0_prediction: np.ndarray
    bias: np.ndarray
    block_form_gap: float


def naive_limit_full(
    theta0: np.ndarray, hbar: np.ndarray, model: ErrorModel
) -> np.ndarray:
    """Forward bias map: the naive limit theta* = (Hbar + Sigma)^{-1} Hbar theta0."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    sigma = model.sigma_full(theta0.size)
    return np.linalg.solve(hbar + sigma, hbar @ theta0)


def naive_limit_block(
    theta0: np.ndarray, hbar: np.ndarray, model: ErrorModel
) -> np.ndarray:
    """Forward bias map in block form:

    theta*_x = (I + Hbar^{-1}_{11} Sigma1)^{-1} theta0_x
    theta*_u = theta0_u - Hbar^{-1}_{21} Sigma1 (I + Hbar^{-1}_{11} Sigma1)^{-1} theta0_x
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    p1 = model.p1
    hinv = np.linalg.inv(hbar)
    a = np.eye(p1) + hinv[:p1, :p1] @ model.sigma1
    tx = np.linalg.solve(a, theta0[:p1])
    tu = theta0[p1:] - hinv[p1:, :p1] @ model.sigma1 @ tx
    return np.concatenate([tx, tu])


def predict_naive_bias(
    theta_star: np.ndarray, model: ErrorModel, hessian_hat: np.ndarray
) -> NaiveBiasPrediction:
    """Invert the normal-error bias formula at the naive fit.

    ``hessian_hat`` plays the role of Hbar, approximated at the naive fit
    (observed-data dual Hessian minus Sigma; see
    :func:`mebalance.correction.corrected_dual_hessian`).  Returns the
    implied theta0, the bias theta* - theta0, and the discrepancy between the
    full and block forms of the forward map (an algebraic identity, so the
    gap is numerical-noise sized for well-conditioned inputs).
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    hbar = np.asarray(hessian_hat, dtype=np.float64)
    sigma = model.sigma_full(theta_star.size)
    smin = float(np.linalg.svd(hbar, compute_uv=False).min())
    if smin < _SV_TOL:
        raise SingularCorrection(
            f"hessian_hat is singular (smallest singular value {smin:.3g})",
            smallest_singular_value=smin,
        )
    theta0 = np.linalg.solve(hbar, (hbar + sigma) @ theta_star)
    back_full = naive_limit_full(theta0, hbar, model)
    back_block = naive_limit_block(theta0, hbar, model)
    gap = float(
        max(
            np.abs(back_full - theta_star).max(initial=0.0),
            np.abs(back_block - theta_star).max(initial=0.0),
        )
    )
    return NaiveBiasPrediction(
        theta0_prediction=theta0, bias=theta_star - theta0, block_form_gap=gap
    )


def bias_lower_bound(
    theta_star: np.ndarray,
    theta_candidate: np.ndarray,
    model: ErrorModel,
    data: Dataset,
    segment_samples: int = 21,
    q: float = 2,
    policy: str = "first",
) -> float:
    """Estimated lower bound on ||theta* - theta0||_q.

    Evaluates ||grad log M(theta*)||_q divided by the supremum of the
    induced q-norm of the estimated error-free dual Hessian over a uniform
    grid on the straight segment between ``theta_candidate`` (the best
    available corrected estimate standing in for theta0) and ``theta_star``.
    Both the Hessian and the segment endpoint are estimated, so this is a
    diagnostic approximation of the bound, not an exact inequality.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    theta_candidate = np.asarray(theta_candidate, dtype=np.float64)
    m, grad, _ = mgf(model, theta_star)
    gnum = float(np.linalg.norm(grad / m, ord=q))
    sup = 0.0
    for t in np.linspace(0.0, 1.0, max(2, segment_samples)):
        point = (1.0 - t) * theta_candidate + t * theta_star
        h = corrected_dual_hessian(point, data, model, policy)
        sup = max(sup, float(np.linalg.norm(h, ord=q)))
    if sup < _SV_TOL:
        raise SingularCorrection(
            "estimated Hessian norm vanishes along the segment",
            smallest_singular_value=sup,
        )
    return gnum / sup
