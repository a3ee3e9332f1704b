"""Exception and warning types shared across the package.

Validation errors map to CLI exit code 2, solver errors to exit code 3.
"""


class MebalanceError(Exception):
    """Base class for all package errors."""


class DataValidationError(MebalanceError):
    """Base class for input-data problems (CLI exit code 2)."""


class NonBinaryTreatment(DataValidationError):
    """Treatment indicator contains values other than 0/1."""


class EmptyArm(DataValidationError):
    """One of the treatment arms has no (or too few) subjects."""


class DimensionMismatch(DataValidationError):
    """Inconsistent covariate or replicate dimensions."""


class NonFiniteValue(DataValidationError):
    """NaN or infinity found in a numeric input field."""


class MissingOutcome(DataValidationError):
    """An outcome-dependent operation was requested on outcome-free data."""


class NoReplicates(DataValidationError):
    """A replicate-based operation needs at least one subject with m_i > 1."""


class ConfigError(DataValidationError):
    """Invalid or contradictory run configuration."""


class SolverError(MebalanceError):
    """Base class for numerical failures (CLI exit code 3)."""


class NotConverged(SolverError):
    """Iteration budget exhausted or iterates diverged.

    Carries the last gradient/residual norm and iteration count.
    """

    def __init__(self, message, grad_norm=None, iterations=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations


class NonFiniteExp(SolverError):
    """An exponent exceeded the safe range (|x| > 700)."""

    def __init__(self, message, subject_id=None):
        super().__init__(message)
        self.subject_id = subject_id


class MgfUndefined(SolverError):
    """The moment generating function diverges at the requested point."""


class SingularCorrection(SolverError):
    """A matrix required by a correction formula is numerically singular."""

    def __init__(self, message, smallest_singular_value=None):
        super().__init__(message)
        self.smallest_singular_value = smallest_singular_value


class BootstrapUnstable(SolverError):
    """Too many bootstrap replicates failed to fit (>= 10%)."""


class AllRepsFailed(SolverError):
    """Every Monte Carlo repetition failed for a (method, scenario) cell."""


class InfeasibleHullWarning(UserWarning):
    """Heuristic flag: a treated mean coordinate lies outside the control range."""


class SingularGmmWeightWarning(UserWarning):
    """Second-step GMM weight matrix was singular; identity used instead."""


class SingularTreatedCovarianceWarning(UserWarning):
    """Treated covariance matrix is singular; Mahalanobis distance unavailable."""
