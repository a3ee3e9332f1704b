"""Uncorrected balancing-weight estimators: entropy balancing and CBPS.

Entropy balancing (EB) fits the dual parameter of the entropy program by
Newton descent on the convex dual loss

    L(theta) = log sum_{T=0} exp(theta' Z_i) - theta' mean(Z | T=1),

whose stationary point gives softmax weights that reproduce the treated
covariate means exactly.  CBPS fits a logistic propensity model subject to
the balancing conditions; with the logistic link and an intercept the
balancing conditions form a just-identified system (the gradient of a smooth
convex function), so the default solver zeroes them exactly and the returned
weights also achieve exact balance.  The over-identified score + balance
stack of the CBPS estimating equations is available via ``stack="full"``,
solved by two-step GMM.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import least_squares
from scipy.special import expit

from .data import BalanceFit, Dataset, WeightVector
from .exceptions import (
    ConfigError,
    InfeasibleHullWarning,
    NotConverged,
    SingularGmmWeightWarning,
)

EXP_CAP = 700.0


@dataclass(frozen=True)
class SolverConfig:
    """Newton / line-search / multi-start knobs shared by all solvers."""

    grad_tol: float = 1e-8
    max_iter: int = 200
    ls_shrink: float = 0.5
    ls_c1: float = 1e-4
    multi_start: int = 5
    restart_scale: float = 0.5

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ConfigError("grad_tol must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")


def softmax_weights(scores: np.ndarray) -> np.ndarray:
    """exp(scores) normalized to sum 1, stabilized by max subtraction."""
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _control_design(
    data: Dataset, observed: bool, policy: str, intercept: bool
) -> Tuple[np.ndarray, np.ndarray]:
    """(control rows, treated mean) of the covariate design, optionally with
    a trailing constant column."""
    z = data.covariates(observed=observed, policy=policy)
    if intercept:
        z = np.hstack([z, np.ones((data.n, 1))])
    return z[data.control_idx], z[data.treated_idx].mean(axis=0)


def _check_hull(zc: np.ndarray, zbar: np.ndarray) -> None:
    lo, hi = zc.min(axis=0), zc.max(axis=0)
    outside = (zbar < lo) | (zbar > hi)
    if outside.any():
        j = int(np.flatnonzero(outside)[0])
        warnings.warn(
            f"treated mean coordinate {j} ({zbar[j]:.6g}) lies outside the "
            f"control range [{lo[j]:.6g}, {hi[j]:.6g}]; the balancing problem "
            "is likely infeasible",
            InfeasibleHullWarning,
        )


def _newton_minimize(
    value_grad: Callable,
    hessian: Callable,
    theta0: np.ndarray,
    cfg: SolverConfig,
    label: str,
):
    """Damped Newton descent with backtracking on a smooth (locally) convex
    objective.  Falls back to the gradient direction when the ridge-shifted
    Hessian fails to factor or Newton is not a descent direction.
    Returns (theta, value, grad_norm, iterations, objective_path).
    """
    theta = np.array(theta0, dtype=np.float64)
    f, g = value_grad(theta)
    if not np.isfinite(f):
        raise NotConverged(f"{label}: objective not finite at the start")
    path = [float(f)]
    for it in range(cfg.max_iter):
        gnorm = float(np.abs(g).max())
        if gnorm <= cfg.grad_tol:
            return theta, float(f), gnorm, it, path
        h = hessian(theta)
        step = None
        try:
            ridge = 1e-10 * max(1.0, float(np.trace(h)) / max(1, h.shape[0]))
            c = cho_factor(h + ridge * np.eye(h.shape[0]), lower=True)
            step = -cho_solve(c, g)
        except np.linalg.LinAlgError:
            step = None
        if step is None or not np.isfinite(step).all() or float(g @ step) >= 0.0:
            step = -g
        slope = float(g @ step)
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + t * step
            fc, gc = value_grad(cand)
            if np.isfinite(fc) and fc <= f + cfg.ls_c1 * t * slope:
                accepted = True
                break
            t *= cfg.ls_shrink
        if not accepted:
            raise NotConverged(
                f"{label}: line search stalled", grad_norm=gnorm, iterations=it
            )
        theta, f, g = cand, fc, gc
        path.append(float(f))
        if np.abs(theta).max() > 1e10:
            raise NotConverged(
                f"{label}: iterates diverged", grad_norm=gnorm, iterations=it
            )
    gnorm = float(np.abs(g).max())
    if gnorm <= cfg.grad_tol:
        return theta, float(f), gnorm, cfg.max_iter, path
    raise NotConverged(
        f"{label}: no convergence in {cfg.max_iter} iterations "
        f"(last grad norm {gnorm:.3g})",
        grad_norm=gnorm,
        iterations=cfg.max_iter,
    )


# ---------------------------------------------------------------------------
# Entropy balancing
# ---------------------------------------------------------------------------

def _eb_parts(theta: np.ndarray, zc: np.ndarray, zbar: np.ndarray):
    """Dual loss, gradient, Hessian and softmax weights at theta."""
    s = zc @ theta
    smax = s.max()
    e = np.exp(s - smax)
    tot = e.sum()
    loss = float(np.log(tot) + smax - theta @ zbar)
    w = e / tot
    mu = w @ zc
    grad = mu - zbar
    centered = zc - mu
    hess = (centered * w[:, None]).T @ centered
    return loss, grad, hess, w


def eb_dual_objective(
    theta: np.ndarray,
    data: Dataset,
    observed: bool = True,
    policy: str = "first",
) -> Tuple[float, np.ndarray, np.ndarray]:
    """EB dual loss with gradient and Hessian.

    The gradient is the softmax-weighted control mean minus the treated mean;
    the Hessian is the softmax-weighted covariance of the covariates
    (positive semidefinite).  The log-sum-exp uses max subtraction, so the
    value is finite for any finite input.
    """
    zc, zbar = _control_design(data, observed, policy, intercept=False)
    loss, grad, hess, _ = _eb_parts(np.asarray(theta, dtype=np.float64), zc, zbar)
    return loss, grad, hess


def solve_eb(
    data: Dataset,
    cfg: SolverConfig = SolverConfig(),
    observed: bool = True,
    policy: str = "first",
    method_label: Optional[str] = None,
) -> BalanceFit:
    """Fit entropy balancing by Newton descent on the dual from theta = 0.

    Requires the treated covariate mean to lie inside the convex hull of the
    control covariates (a coordinate range check emits
    :class:`InfeasibleHullWarning` heuristically).  Raises
    :class:`NotConverged` on failure.
    """
    zc, zbar = _control_design(data, observed, policy, intercept=False)
    _check_hull(zc, zbar)

    def value_grad(th):
        loss, grad, _, _ = _eb_parts(th, zc, zbar)
        return loss, grad

    def hessian(th):
        return _eb_parts(th, zc, zbar)[2]

    label = method_label or ("eb" if observed else "eb_true")
    theta, loss, gnorm, it, path = _newton_minimize(
        value_grad, hessian, np.zeros(zc.shape[1]), cfg, label
    )
    w = softmax_weights(zc @ theta)
    return BalanceFit(
        theta=theta,
        weights=WeightVector(
            values=w,
            control_indices=data.control_idx,
            ids=data.ids[data.control_idx],
        ),
        converged=True,
        grad_norm=gnorm,
        iterations=it,
        method=label,
        objective=loss,
        objective_path=tuple(path),
    )


# ---------------------------------------------------------------------------
# CBPS
# ---------------------------------------------------------------------------

def _cbps_design(data: Dataset, observed: bool, policy: str) -> np.ndarray:
    if not data.intercept_flag:
        raise ConfigError("CBPS fitting requires intercept_flag=True")
    z = data.covariates(observed=observed, policy=policy)
    return np.hstack([z, np.ones((data.n, 1))])


def cbps_moments(
    theta: np.ndarray,
    data: Dataset,
    observed: bool = True,
    policy: str = "first",
) -> np.ndarray:
    """Stacked CBPS estimating equations at theta (intercept appended last).

    First block: logistic likelihood score sum_i (T_i - pi(Z_i)) Z_i.
    Second block: balancing conditions sum_{T=0} w_i(theta) Z_i - mean(Z|T=1)
    with w_i = exp(theta'Z_i)/n1.
    """
    z = _cbps_design(data, observed, policy)
    theta = np.asarray(theta, dtype=np.float64)
    t = data.treat
    s = z @ theta
    score = ((t - expit(s))[:, None] * z).sum(axis=0)
    ctrl = data.control_idx
    e = np.exp(np.clip(s[ctrl], None, EXP_CAP))
    balance = (e[:, None] * z[ctrl]).sum(axis=0) / data.n1 - z[data.treated_idx].mean(
        axis=0
    )
    return np.concatenate([score, balance])


def _cbps_per_obs_moments(theta, z, t, n1):
    s = z @ theta
    score_i = (t - expit(s))[:, None] * z
    e = np.exp(np.clip(s, None, EXP_CAP))
    bal_i = ((1 - t) * e)[:, None] * z / n1 - (t[:, None] * z) / n1
    return np.hstack([score_i, bal_i])


def _cbps_mean_jacobian(theta, z, t, n1):
    n = z.shape[0]
    s = z @ theta
    pi = expit(s)
    js = -(z * (pi * (1 - pi))[:, None]).T @ z / n
    e = np.exp(np.clip(s, None, EXP_CAP)) * (1 - t)
    jb = (z * e[:, None]).T @ z / (n1 * n)
    return np.vstack([js, jb])


def gmm_objective(
    theta: np.ndarray,
    data: Dataset,
    weight_matrix: Optional[np.ndarray] = None,
    observed: bool = True,
    policy: str = "first",
) -> float:
    """Quadratic form g' W g of the mean stacked CBPS moments (W=I default)."""
    z = _cbps_design(data, observed, policy)
    g = _cbps_per_obs_moments(
        np.asarray(theta, dtype=np.float64), z, data.treat, data.n1
    ).mean(axis=0)
    if weight_matrix is None:
        return float(g @ g)
    return float(g @ weight_matrix @ g)


def _two_step_gmm(per_obs, mean_jac, starts, cfg, label):
    """Two-step GMM: identity weight, then inverse empirical outer product
    (ridge stabilized; identity fallback with a warning when singular).
    Returns (theta, objective value under the step-2 weighting, grad_norm).
    """

    def _minimize(a_matrix, x0):
        if a_matrix is None:
            fun = lambda th: per_obs(th).mean(axis=0)
            jac = mean_jac
        else:
            fun = lambda th: a_matrix @ per_obs(th).mean(axis=0)
            jac = lambda th: a_matrix @ mean_jac(th)
        res = least_squares(
            fun, x0, jac=jac, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14
        )
        return res.x, 2.0 * float(np.abs(jac(res.x).T @ fun(res.x)).max())

    best = None
    for x0 in starts:
        try:
            th1, _ = _minimize(None, np.asarray(x0, dtype=np.float64))
        except Exception:
            continue
        gi = per_obs(th1)
        nobs, k = gi.shape
        omega = gi.T @ gi / nobs
        omega += (1e-8 * np.trace(omega) / k) * np.eye(k)
        try:
            low = np.linalg.cholesky(omega)
            a_matrix = solve_triangular(low, np.eye(k), lower=True)
        except np.linalg.LinAlgError:
            warnings.warn(
                f"{label}: singular GMM weight matrix, falling back to identity",
                SingularGmmWeightWarning,
            )
            a_matrix = None
        th2, gnorm = _minimize(a_matrix, th1)
        g2 = per_obs(th2).mean(axis=0)
        val = float(np.sum((a_matrix @ g2) ** 2)) if a_matrix is not None else float(
            g2 @ g2
        )
        if best is None or val < best[1]:
            best = (th2, val, gnorm)
    if best is None:
        raise NotConverged(f"{label}: every GMM start failed")
    return best


def solve_cbps(
    data: Dataset,
    cfg: SolverConfig = SolverConfig(),
    observed: bool = True,
    policy: str = "first",
    stack: str = "balance",
    method_label: Optional[str] = None,
) -> BalanceFit:
    """Fit CBPS under the logistic link with an intercept.

    ``stack="balance"`` (default) zeroes the balancing conditions exactly:
    they are the gradient of the strictly convex function
    n1^{-1} sum_{T=0} exp(theta'Z_i) - theta' mean(Z|T=1), so a Newton
    descent finds the unique root and the fitted weights reproduce the
    treated covariate means to solver precision (the likelihood score then
    holds asymptotically).  ``stack="full"`` runs two-step GMM on the full
    over-identified score + balance stack instead; it does not achieve exact
    finite-sample balance.
    """
    z = _cbps_design(data, observed, policy)
    ctrl = data.control_idx
    zc, zbar = z[ctrl], z[data.treated_idx].mean(axis=0)
    n1 = data.n1
    label = method_label or ("cbps" if observed else "cbps_true")

    if stack == "balance":
        def value_grad(th):
            s = zc @ th
            if s.max() > EXP_CAP:
                return np.inf, np.zeros_like(th)
            e = np.exp(s)
            val = float(e.sum() / n1 - th @ zbar)
            grad = (e[:, None] * zc).sum(axis=0) / n1 - zbar
            return val, grad

        def hessian(th):
            e = np.exp(np.clip(zc @ th, None, EXP_CAP))
            return (zc * e[:, None]).T @ zc / n1

        theta, val, gnorm, it, path = _newton_minimize(
            value_grad, hessian, np.zeros(z.shape[1]), cfg, label
        )
        objective = val
        obj_path: Optional[tuple] = tuple(path)
    elif stack == "full":
        t = data.treat
        per_obs = lambda th: _cbps_per_obs_moments(th, z, t, n1)
        mean_jac = lambda th: _cbps_mean_jacobian(th, z, t, n1)
        theta, objective, gnorm = _two_step_gmm(
            per_obs, mean_jac, [np.zeros(z.shape[1])], cfg, label
        )
        it = cfg.max_iter
        obj_path = None
        if not np.isfinite(theta).all():
            raise NotConverged(f"{label}: GMM produced non-finite parameters")
    else:
        raise ConfigError("stack must be 'balance' or 'full'")

    w = softmax_weights(zc @ theta)  # Eq-(7) weights exp(theta'Z)/n1, renormalized
    return BalanceFit(
        theta=theta,
        weights=WeightVector(
            values=w, control_indices=ctrl, ids=data.ids[ctrl]
        ),
        converged=True,
        grad_norm=gnorm,
        iterations=it,
        method=label,
        objective=objective,
        objective_path=obj_path,
    )


def att(weights: WeightVector, data: Dataset) -> float:
    """Weighting estimate of the average treatment effect on the treated:
    treated outcome mean minus the weighted control outcome mean."""
    y = data.outcome_required()
    ybar_trt = y[data.treated_idx].mean()
    return float(ybar_trt - weights.values @ y[weights.control_indices])
