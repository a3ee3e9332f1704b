"""Measurement-error-corrected balancing estimators.

Five corrections are provided:

* ``ceb``: subtracts log M(theta) from the observed-data EB dual loss and
  finds a stationary point (the corrected loss may be non-convex, so the
  solver multi-starts a damped Newton root-finder on the gradient and keeps
  the stationary point with the smallest objective).
* ``bceb``: one-shot matrix correction of the naive EB fit via the inverted
  asymptotic bias formula under normal errors.
* ``ceb_hl`` / ``ceb_hw``: replicate-based estimating functions that need no
  error distribution (``ceb_hl`` assumes symmetry); solved as root-finding
  problems with finite-difference Jacobians.
* ``corrected_cbps``: conditional-score / corrected-balancing CBPS under
  normal errors.  The default zeroes the corrected balancing conditions
  exactly (they are the gradient of a smooth potential); ``stack="full"``
  runs two-step GMM on the conditional score + corrected balance stack.

Weight construction: parametric corrections reuse the softmax weight on the
observed covariates; replicate-based corrections average exp(theta'Z*_ij)
over each subject's replicates before normalizing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from .balancing import (
    EXP_CAP,
    SolverConfig,
    _cbps_design,
    _eb_parts,
    _two_step_gmm,
    softmax_weights,
    solve_cbps,
    solve_eb,
)
from .data import BalanceFit, Dataset, WeightVector
from .error_model import ErrorModel, ReplicatePairs, log_mgf_terms
from .exceptions import (
    ConfigError,
    NonFiniteExp,
    NoReplicates,
    NotConverged,
    SingularCorrection,
)

CORRECTION_METHODS = ("ceb", "bceb", "ceb_hl", "ceb_hw", "corrected_cbps")


@dataclass(frozen=True)
class CorrectionSpec:
    """Which corrected estimator to run and with what inputs."""

    method: str
    error_model: Optional[ErrorModel] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    replicate_policy: str = "first"

    def __post_init__(self):
        if self.method not in CORRECTION_METHODS:
            raise ConfigError(f"method must be one of {CORRECTION_METHODS}")
        if self.method in ("ceb", "bceb", "corrected_cbps") and self.error_model is None:
            raise ConfigError(f"method '{self.method}' requires an error model")
        if self.method == "corrected_cbps" and self.error_model.family != "normal":
            raise ConfigError("corrected_cbps requires the normal error family")


# ---------------------------------------------------------------------------
# Damped-Newton root finding on estimating functions
# ---------------------------------------------------------------------------

def _fd_jacobian(residual: Callable, theta: np.ndarray, rel_step: float = 1e-6):
    p = theta.size
    r0 = residual(theta)
    jac = np.empty((r0.size, p))
    for k in range(p):
        h = rel_step * max(1.0, abs(theta[k]))
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        jac[:, k] = (residual(tp) - residual(tm)) / (2.0 * h)
    return jac


def _root_newton(
    residual: Callable,
    jacobian: Optional[Callable],
    theta0: np.ndarray,
    cfg: SolverConfig,
    label: str,
):
    """Damped Newton on residual(theta) = 0 with an L2 merit line search.

    ``jacobian=None`` uses central finite differences (relative step 1e-6).
    NonFiniteExp raised inside a trial step is treated as a rejected step.
    Returns (theta, residual_inf_norm, iterations).
    """
    jac = jacobian if jacobian is not None else (
        lambda th: _fd_jacobian(residual, th)
    )
    theta = np.asarray(theta0, dtype=np.float64).copy()
    r = residual(theta)
    merit = 0.5 * float(r @ r)
    for it in range(cfg.max_iter):
        rnorm = float(np.abs(r).max())
        if rnorm <= cfg.grad_tol:
            return theta, rnorm, it
        j = jac(theta)
        try:
            step = np.linalg.solve(j, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(j, -r, rcond=None)[0]
        if not np.isfinite(step).all():
            step = -j.T @ r
        slope = float(r @ (j @ step))  # derivative of the merit along step
        if slope >= 0.0:
            step = -j.T @ r
            slope = float(r @ (j @ step))
        t = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + t * step
            try:
                rc = residual(cand)
            except NonFiniteExp:
                t *= cfg.ls_shrink
                continue
            if np.isfinite(rc).all():
                with np.errstate(over="ignore"):
                    mc = 0.5 * float(rc @ rc)
                if np.isfinite(mc) and (
                    mc <= merit + cfg.ls_c1 * t * slope or mc < merit * (1 - 1e-12)
                ):
                    accepted = True
                    break
            t *= cfg.ls_shrink
        if not accepted:
            raise NotConverged(
                f"{label}: line search stalled", grad_norm=rnorm, iterations=it
            )
        theta, r, merit = cand, rc, mc
        if np.abs(theta).max() > 1e10:
            raise NotConverged(
                f"{label}: iterates diverged", grad_norm=rnorm, iterations=it
            )
    rnorm = float(np.abs(r).max())
    if rnorm <= cfg.grad_tol:
        return theta, rnorm, cfg.max_iter
    raise NotConverged(
        f"{label}: no convergence in {cfg.max_iter} iterations "
        f"(last residual norm {rnorm:.3g})",
        grad_norm=rnorm,
        iterations=cfg.max_iter,
    )


def _multi_start_points(center: np.ndarray, cfg: SolverConfig):
    """theta = 0, the supplied center, then seeded perturbations around it."""
    starts = [np.zeros_like(center)]
    if np.abs(center).max(initial=0.0) > 0:
        starts.append(center.copy())
    rng = np.random.default_rng(0)
    while len(starts) < max(1, cfg.multi_start):
        scale = cfg.restart_scale * (1.0 + np.abs(center))
        starts.append(center + scale * rng.standard_normal(center.size))
    return starts


def _is_local_min(jacobian_at_root: np.ndarray) -> bool:
    """Accept a stationary point only when the Hessian of its potential is
    positive semidefinite (up to scaled noise); the corrected objectives are
    unbounded below, so far-field saddle/maximum roots with degenerate
    weights must be rejected."""
    eig = np.linalg.eigvalsh((jacobian_at_root + jacobian_at_root.T) / 2.0)
    return bool(eig.min() >= -1e-6 * max(1.0, float(np.abs(eig).max())))


def _best_root(
    residual, jacobian, objective, starts, cfg, label, accept=None
) -> Tuple[np.ndarray, float, int, Optional[float]]:
    """Run the damped Newton root finder from several starts.

    With an objective, every start is tried and the converged root passing
    ``accept`` with the smallest objective wins (ties: earliest start).
    Without one, the first converged root is returned (multi-start only
    bridges failures).
    """
    best = None
    rejected = 0
    last_err: Optional[NotConverged] = None
    for x0 in starts:
        try:
            theta, rnorm, it = _root_newton(residual, jacobian, x0, cfg, label)
        except (NotConverged, NonFiniteExp) as err:
            if isinstance(err, NotConverged):
                last_err = err
            continue
        if accept is not None and not accept(theta):
            rejected += 1
            continue
        if objective is None:
            return theta, rnorm, it, None
        val = objective(theta)
        if not np.isfinite(val):
            continue
        if best is None or val < best[3] - 1e-12:
            best = (theta, rnorm, it, val)
    if best is None:
        if rejected and last_err is None:
            raise NotConverged(
                f"{label}: only degenerate stationary points found "
                f"({rejected} rejected)"
            )
        raise last_err or NotConverged(f"{label}: every start failed")
    return best


# ---------------------------------------------------------------------------
# CEB: corrected entropy balancing
# ---------------------------------------------------------------------------

def ceb_objective(
    theta: np.ndarray,
    data: Dataset,
    model: ErrorModel,
    policy: str = "first",
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Corrected EB loss L(theta; observed) - log M(theta), with gradient
    and Hessian."""
    z = data.covariates(observed=True, policy=policy)
    zc, zbar = z[data.control_idx], z[data.treated_idx].mean(axis=0)
    theta = np.asarray(theta, dtype=np.float64)
    loss, grad, hess, _ = _eb_parts(theta, zc, zbar)
    logm, glogm, hlogm = log_mgf_terms(model, theta)
    return loss - logm, grad - glogm, hess - hlogm


def observed_dual_hessian(
    theta: np.ndarray, data: Dataset, policy: str = "first"
) -> np.ndarray:
    """Hessian of the naive EB dual loss on the observed covariates."""
    z = data.covariates(observed=True, policy=policy)
    return _eb_parts(
        np.asarray(theta, dtype=np.float64),
        z[data.control_idx],
        z[data.treated_idx].mean(axis=0),
    )[2]


def corrected_dual_hessian(
    theta: np.ndarray, data: Dataset, model: ErrorModel, policy: str = "first"
) -> np.ndarray:
    """Estimate of the error-free dual Hessian H(theta): the observed-data
    Hessian minus the error covariance block."""
    h = observed_dual_hessian(theta, data, policy)
    return h - model.sigma_full(h.shape[0])


def _naive_eb_theta(data: Dataset, cfg: SolverConfig, policy: str):
    try:
        return solve_eb(data, cfg, observed=True, policy=policy).theta
    except NotConverged:
        return None


def solve_ceb(data: Dataset, spec: CorrectionSpec) -> BalanceFit:
    """Corrected entropy balancing.

    Finds a stationary point of L(theta; observed) - log M(theta) by
    multi-start damped Newton on the gradient (starts: 0, the naive EB fit,
    and seeded perturbations around it); among converged stationary points
    the one with the smallest corrected objective is returned.  Weights are
    the softmax of theta_c' Z* over the control group.
    """
    if spec.error_model is None:
        raise ConfigError("solve_ceb requires an error model")
    model, cfg, policy = spec.error_model, spec.solver, spec.replicate_policy
    z = data.covariates(observed=True, policy=policy)
    zc, zbar = z[data.control_idx], z[data.treated_idx].mean(axis=0)

    def residual(th):
        _, grad, _, _ = _eb_parts(th, zc, zbar)
        return grad - log_mgf_terms(model, th)[1]

    def jacobian(th):
        _, _, hess, _ = _eb_parts(th, zc, zbar)
        return hess - log_mgf_terms(model, th)[2]

    def objective(th):
        loss = _eb_parts(th, zc, zbar)[0]
        return loss - log_mgf_terms(model, th)[0]

    center = _naive_eb_theta(data, cfg, policy)
    starts = _multi_start_points(
        center if center is not None else np.zeros(zc.shape[1]), cfg
    )
    theta, rnorm, it, val = _best_root(
        residual,
        jacobian,
        objective,
        starts,
        cfg,
        "ceb",
        accept=lambda th: _is_local_min(jacobian(th)),
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
        grad_norm=rnorm,
        iterations=it,
        method="ceb",
        objective=val,
    )


# ---------------------------------------------------------------------------
# BCEB: one-shot bias correction of the naive fit
# ---------------------------------------------------------------------------

def solve_bceb(data: Dataset, spec: CorrectionSpec) -> BalanceFit:
    """Bias-corrected entropy balancing.

    Computes the naive EB fit theta*, then applies the inverted bias formula
    theta_c = (H* - Sigma)^{-1} H* theta* with H* the observed-data dual
    Hessian at theta*.  Raises :class:`SingularCorrection` when H* - Sigma is
    singular (tolerance 1e-12 on its smallest singular value).
    """
    if spec.error_model is None:
        raise ConfigError("solve_bceb requires an error model")
    model, cfg, policy = spec.error_model, spec.solver, spec.replicate_policy
    naive = solve_eb(data, cfg, observed=True, policy=policy)
    hs = observed_dual_hessian(naive.theta, data, policy)
    a = hs - model.sigma_full(hs.shape[0])
    smin = float(np.linalg.svd(a, compute_uv=False).min())
    if smin < 1e-12:
        raise SingularCorrection(
            f"corrected Hessian is singular (smallest singular value {smin:.3g})",
            smallest_singular_value=smin,
        )
    theta = np.linalg.solve(a, hs @ naive.theta)
    z = data.covariates(observed=True, policy=policy)
    w = softmax_weights(z[data.control_idx] @ theta)
    return BalanceFit(
        theta=theta,
        weights=WeightVector(
            values=w,
            control_indices=data.control_idx,
            ids=data.ids[data.control_idx],
        ),
        converged=True,
        grad_norm=0.0,
        iterations=naive.iterations,
        method="bceb",
    )


# ---------------------------------------------------------------------------
# Replicate-based estimating functions (CEB-HL / CEB-HW)
# ---------------------------------------------------------------------------

class _ReplicateViews:
    """Precomputed stacked replicate rows for fast estimating-function
    evaluation: full covariate rows [x*_ij | u_i] for every replicate."""

    def __init__(self, data: Dataset):
        self.data = data
        self.pairs = ReplicatePairs(data)
        rows = []
        owner = []
        for i in data.control_idx:
            xi = data.x_star[i]
            ui = np.broadcast_to(data.u[i], (xi.shape[0], data.p2))
            rows.append(np.hstack([xi, ui]))
            owner.extend([i] * xi.shape[0])
        self.ctrl_rows = np.vstack(rows)
        self.ctrl_owner = np.asarray(owner)
        self.ctrl_ids = data.control_idx
        self.ctrl_m = data.m[data.control_idx].astype(np.float64)
        self.ctrl_pos = np.searchsorted(
            data.control_idx, self.ctrl_owner
        )  # row -> control slot
        trt = data.treated_idx
        self.trt_m = data.m[trt].astype(np.float64)
        z_trt = []
        for i in trt:
            xi = data.x_star[i]
            ui = np.broadcast_to(data.u[i], (xi.shape[0], data.p2))
            z_trt.append(np.hstack([xi, ui]))
        stacked = np.vstack(z_trt)
        self.trt_pooled_mean = stacked.sum(axis=0) / self.trt_m.sum()
        per_subject = [zi.mean(axis=0) for zi in z_trt]
        self.trt_subject_mean = np.mean(per_subject, axis=0)

    def exp_scores(self, theta):
        s = self.ctrl_rows @ theta
        if np.abs(s).max(initial=0.0) > EXP_CAP:
            bad = int(np.argmax(np.abs(s)))
            sid = self.data.ids[self.ctrl_owner[bad]]
            raise NonFiniteExp(
                f"exp overflow for subject {sid!r}", subject_id=sid
            )
        return np.exp(s)

    def subject_sum(self, values):
        out = np.zeros(self.ctrl_ids.size)
        np.add.at(out, self.ctrl_pos, values)
        return out

    def subject_sum_rows(self, rows):
        out = np.zeros((self.ctrl_ids.size, rows.shape[1]))
        np.add.at(out, self.ctrl_pos, rows)
        return out


def _require_control_replicates(data: Dataset):
    if not (data.m[data.control_idx] > 1).any():
        raise NoReplicates(
            "no control subject has replicated measurements (m_i > 1)"
        )


def _b_hl(theta: np.ndarray, data: Dataset, views: _ReplicateViews) -> np.ndarray:
    eta0, grad_x = views.pairs.eta0(theta[: data.p1])
    eta1 = np.zeros(theta.size)
    eta1[: data.p1] = grad_x
    ratio = eta1 / eta0
    e = views.exp_scores(theta)
    r0 = views.subject_sum(e) / (views.ctrl_m * eta0)
    r1 = views.subject_sum_rows(e[:, None] * (views.ctrl_rows - ratio)) / (
        views.ctrl_m[:, None] * eta0
    )
    return r1.sum(axis=0) / r0.sum() - views.trt_pooled_mean


def _b_hw(theta: np.ndarray, data: Dataset, views: _ReplicateViews) -> np.ndarray:
    xi = (views.ctrl_m > 1).astype(np.float64)
    e = views.exp_scores(theta)
    sum_e = views.subject_sum(e)
    sum_z = views.subject_sum_rows(views.ctrl_rows)
    sum_ez = views.subject_sum_rows(e[:, None] * views.ctrl_rows)
    mm1 = views.ctrl_m * np.maximum(views.ctrl_m - 1.0, 1.0)
    # sum over ordered pairs j != k of e_ij z_ik = (sum e)(sum z) - sum e z
    numer = (xi / mm1)[:, None] * (sum_e[:, None] * sum_z - sum_ez)
    denom = (xi / views.ctrl_m) * sum_e
    return numer.sum(axis=0) / denom.sum() - views.trt_subject_mean


def b_hl(theta: np.ndarray, data: Dataset) -> np.ndarray:
    """Symmetric-error replicate estimating function.

    Ratio of eta-corrected replicate sums over controls minus the
    replicate-pooled treated mean; conditionally unbiased for the true-data
    EB dual gradient under symmetric errors.  The per-subject numerator term
    averages exp(theta'Z*_ij)(Z*_ij - eta1/eta0) over that subject's
    replicates.
    """
    _require_control_replicates(data)
    theta = np.asarray(theta, dtype=np.float64)
    return _b_hl(theta, data, _ReplicateViews(data))


def b_hw(theta: np.ndarray, data: Dataset) -> np.ndarray:
    """Distribution-free replicate estimating function (cross-replicate
    form); control subjects without replicates drop out entirely, and the
    treated side averages per-subject replicate means with equal subject
    weights."""
    _require_control_replicates(data)
    theta = np.asarray(theta, dtype=np.float64)
    return _b_hw(theta, data, _ReplicateViews(data))


def replicated_weights(theta: np.ndarray, data: Dataset) -> WeightVector:
    """Replicate-averaged softmax weight: per control subject,
    m_i^{-1} sum_j exp(theta'Z*_ij), normalized over the control group."""
    theta = np.asarray(theta, dtype=np.float64)
    log_num = np.empty(data.n0)
    for slot, i in enumerate(data.control_idx):
        xi = data.x_star[i]
        s = xi @ theta[: data.p1] + data.u[i] @ theta[data.p1 :]
        log_num[slot] = logsumexp(s) - np.log(xi.shape[0])
    return WeightVector(
        values=softmax_weights(log_num),
        control_indices=data.control_idx,
        ids=data.ids[data.control_idx],
    )


def solve_replicated(data: Dataset, spec: CorrectionSpec) -> BalanceFit:
    """Solve B_HL = 0 (method ``ceb_hl``) or B_HW = 0 (``ceb_hw``) by damped
    Newton with finite-difference Jacobians, multi-starting from 0, the
    naive EB fit, and seeded perturbations; weights are the replicate-
    averaged softmax."""
    if spec.method not in ("ceb_hl", "ceb_hw"):
        raise ConfigError("solve_replicated handles methods 'ceb_hl' and 'ceb_hw'")
    _require_control_replicates(data)
    cfg = spec.solver
    views = _ReplicateViews(data)
    fun = _b_hl if spec.method == "ceb_hl" else _b_hw

    def residual(th):
        return fun(th, data, views)

    center = _naive_eb_theta(data, cfg, spec.replicate_policy)
    starts = _multi_start_points(
        center if center is not None else np.zeros(data.p), cfg
    )
    theta, rnorm, it, _ = _best_root(residual, None, None, starts, cfg, spec.method)
    return BalanceFit(
        theta=theta,
        weights=replicated_weights(theta, data),
        converged=True,
        grad_norm=rnorm,
        iterations=it,
        method=spec.method,
    )


# ---------------------------------------------------------------------------
# Corrected CBPS (normal errors)
# ---------------------------------------------------------------------------

def _require_normal(model: Optional[ErrorModel], what: str) -> ErrorModel:
    if model is None or model.family != "normal":
        raise ConfigError(f"{what} requires a normal error model")
    return model


def conditional_score(
    theta: np.ndarray, data: Dataset, model: ErrorModel, policy: str = "first"
) -> np.ndarray:
    """Conditional-score logistic estimating function on the observed
    covariates (intercept appended last): the logistic score with offset
    (T - 0.5) theta_x' Sigma1 theta_x inside the link."""
    model = _require_normal(model, "conditional_score")
    z = _cbps_design(data, observed=True, policy=policy)
    theta = np.asarray(theta, dtype=np.float64)
    tx = theta[: data.p1]
    q = float(tx @ model.sigma1 @ tx)
    s = z @ theta + (data.treat - 0.5) * q
    return ((data.treat - expit(s))[:, None] * z).sum(axis=0)


def c_hw_moments(
    theta: np.ndarray, data: Dataset, model: ErrorModel, policy: str = "first"
) -> np.ndarray:
    """Corrected balancing conditions under normal errors (intercept
    appended last):

    n1^{-1} sum_{T=0} (Z*_i - Sigma theta) exp(theta'Z*_i - q/2) - mean(Z*|T=1)

    with q = theta_x' Sigma1 theta_x; conditionally unbiased for the
    true-covariate balancing moment."""
    model = _require_normal(model, "c_hw_moments")
    z = _cbps_design(data, observed=True, policy=policy)
    theta = np.asarray(theta, dtype=np.float64)
    sigma = model.sigma_full(z.shape[1])
    q = float(theta[: data.p1] @ model.sigma1 @ theta[: data.p1])
    ctrl = data.control_idx
    expo = z[ctrl] @ theta - 0.5 * q
    if np.abs(expo).max(initial=0.0) > EXP_CAP:
        raise NonFiniteExp("corrected balancing exponent overflow")
    e = np.exp(expo)
    st = sigma @ theta
    term = (e[:, None] * (z[ctrl] - st)).sum(axis=0) / data.n1
    return term - z[data.treated_idx].mean(axis=0)


def _chw_parts(theta, zc, zbar_trt, sigma, n1):
    """Potential, gradient (= C_HW) and Jacobian of the corrected balancing
    system; the potential is n1^{-1} sum exp(theta'Z* - q/2) - theta'ztrt."""
    st = sigma @ theta
    q = float(theta @ st)
    expo = zc @ theta - 0.5 * q
    if np.abs(expo).max(initial=0.0) > EXP_CAP:
        raise NonFiniteExp("corrected balancing exponent overflow")
    e = np.exp(expo)
    val = float(e.sum() / n1 - theta @ zbar_trt)
    d = zc - st
    grad = (e[:, None] * d).sum(axis=0) / n1 - zbar_trt
    jac = (d * e[:, None]).T @ d / n1 - (e.sum() / n1) * sigma
    return val, grad, jac


def solve_corrected_cbps(
    data: Dataset, spec: CorrectionSpec, stack: str = "balance"
) -> BalanceFit:
    """Corrected CBPS under normal errors (intercept appended last).

    ``stack="balance"`` (default) zeroes the corrected balancing conditions
    C_HW(theta) = 0 exactly via multi-start damped Newton (selecting, among
    stationary points of the associated potential, the one with the smallest
    potential value); the conditional score then holds asymptotically.  With
    zero error variance this reduces exactly to the default naive CBPS.
    ``stack="full"`` runs two-step GMM on the stacked (conditional score,
    corrected balance) system.  Weights are the normalized softmax of
    theta_c'Z* over the control group.
    """
    if spec.method != "corrected_cbps":
        raise ConfigError("spec.method must be 'corrected_cbps'")
    model = _require_normal(spec.error_model, "solve_corrected_cbps")
    cfg, policy = spec.solver, spec.replicate_policy
    z = _cbps_design(data, observed=True, policy=policy)
    ctrl = data.control_idx
    zc, zbar = z[ctrl], z[data.treated_idx].mean(axis=0)
    sigma = model.sigma_full(z.shape[1])
    n1 = data.n1

    def naive_theta():
        try:
            return solve_cbps(data, cfg, observed=True, policy=policy).theta
        except NotConverged:
            return None

    if stack == "balance":
        def residual(th):
            return _chw_parts(th, zc, zbar, sigma, n1)[1]

        def jacobian(th):
            return _chw_parts(th, zc, zbar, sigma, n1)[2]

        def objective(th):
            return _chw_parts(th, zc, zbar, sigma, n1)[0]

        center = naive_theta()
        starts = _multi_start_points(
            center if center is not None else np.zeros(z.shape[1]), cfg
        )
        theta, rnorm, it, _ = _best_root(
            residual,
            jacobian,
            objective,
            starts,
            cfg,
            "corrected_cbps",
            accept=lambda th: _is_local_min(jacobian(th)),
        )
    elif stack == "full":
        t = data.treat.astype(np.float64)

        def per_obs(th):
            tx = th[: data.p1]
            q = float(tx @ model.sigma1 @ tx)
            s = z @ th + (t - 0.5) * q
            score_i = (t - expit(s))[:, None] * z
            expo = np.clip(z @ th - 0.5 * q, None, EXP_CAP)
            e = np.exp(expo) * (1 - t)
            bal_i = (e[:, None] * (z - sigma @ th)) / n1 - (t[:, None] * z) / n1
            return np.hstack([score_i, bal_i])

        def mean_jac(th):
            n = z.shape[0]
            st = sigma @ th
            q = float(th @ st)
            s = z @ th + (t - 0.5) * q
            pi = expit(s)
            dsdt = z + 2.0 * (t - 0.5)[:, None] * st
            js = -(z * (pi * (1 - pi))[:, None]).T @ dsdt / n
            e = np.exp(np.clip(z @ th - 0.5 * q, None, EXP_CAP)) * (1 - t)
            d = z - st
            jb = ((d * e[:, None]).T @ d / n1 - (e.sum() / n1) * sigma) / n
            return np.vstack([js, jb])

        starts = [np.zeros(z.shape[1])]
        nt = naive_theta()
        if nt is not None:
            starts.append(nt)
        theta, _, rnorm = _two_step_gmm(per_obs, mean_jac, starts, cfg, "corrected_cbps")
        it = cfg.max_iter
    else:
        raise ConfigError("stack must be 'balance' or 'full'")

    w = softmax_weights(zc @ theta)
    return BalanceFit(
        theta=theta,
        weights=WeightVector(values=w, control_indices=ctrl, ids=data.ids[ctrl]),
        converged=True,
        grad_norm=rnorm,
        iterations=it,
        method="corrected_cbps",
    )


def solve_corrected(data: Dataset, spec: CorrectionSpec) -> BalanceFit:
    """Dispatch to the corrected estimator named by ``spec.method``."""
    if spec.method == "ceb":
        return solve_ceb(data, spec)
    if spec.method == "bceb":
        return solve_bceb(data, spec)
    if spec.method in ("ceb_hl", "ceb_hw"):
        return solve_replicated(data, spec)
    return solve_corrected_cbps(data, spec)
