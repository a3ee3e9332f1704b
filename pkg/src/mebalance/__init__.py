"""Covariate balancing weights with measurement error correction.

Entropy balancing and CBPS weight estimators, their measurement-error-
corrected variants (CEB, BCEB, CEB-HL, CEB-HW, corrected CBPS), imbalance
diagnostics with large-sample limits, ATT estimation with bootstrap
inference, and a reproducible Monte Carlo harness.
"""

from .balancing import SolverConfig, att, cbps_moments, eb_dual_objective, solve_cbps, solve_eb
from .correction import (
    CorrectionSpec,
    b_hl,
    b_hw,
    c_hw_moments,
    ceb_objective,
    conditional_score,
    corrected_dual_hessian,
    replicated_weights,
    solve_bceb,
    solve_ceb,
    solve_corrected,
    solve_corrected_cbps,
    solve_replicated,
)
from .data import BalanceFit, Dataset, TreatedMoments, WeightVector, treated_moments, validate
from .diagnostics import (
    ImbalanceReport,
    NaiveBiasPrediction,
    asymptotic_imbalance,
    bias_lower_bound,
    imbalance,
    predict_naive_bias,
)
from .error_model import ErrorModel, estimate_sigma, eta0_hat, mgf
from .experiments import (
    AttResult,
    MethodCell,
    MonteCarloTable,
    ScenarioSpec,
    att_result,
    bootstrap,
    fit_method,
    generate,
    run_table,
)
from . import exceptions

__version__ = "0.1.0"

__all__ = [
    "AttResult",
    "BalanceFit",
    "CorrectionSpec",
    "Dataset",
    "ErrorModel",
    "ImbalanceReport",
    "MethodCell",
    "MonteCarloTable",
    "NaiveBiasPrediction",
    "ScenarioSpec",
    "SolverConfig",
    "TreatedMoments",
    "WeightVector",
    "asymptotic_imbalance",
    "att",
    "att_result",
    "b_hl",
    "b_hw",
    "bias_lower_bound",
    "bootstrap",
    "c_hw_moments",
    "cbps_moments",
    "ceb_objective",
    "conditional_score",
    "corrected_dual_hessian",
    "eb_dual_objective",
    "estimate_sigma",
    "eta0_hat",
    "exceptions",
    "fit_method",
    "generate",
    "imbalance",
    "mgf",
    "predict_naive_bias",
    "replicated_weights",
    "run_table",
    "solve_bceb",
    "solve_cbps",
    "solve_ceb",
    "solve_corrected",
    "solve_corrected_cbps",
    "solve_eb",
    "solve_replicated",
    "treated_moments",
    "validate",
]
