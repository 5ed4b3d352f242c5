"""Exception types raised across the package."""

from __future__ import annotations


class RakesurvError(Exception):
    """Base class for all package errors."""


class ParameterError(RakesurvError, ValueError):
    """Invalid distribution or configuration parameter."""


class DimensionError(RakesurvError, ValueError):
    """Array shapes do not conform."""


class SingularMatrixError(RakesurvError, ArithmeticError):
    """Matrix is not positive definite or too badly conditioned to invert.

    Attributes
    ----------
    min_eigenvalue : float
        Smallest eigenvalue estimate of the offending matrix.
    matrix : ndarray
        The offending matrix.
    """

    def __init__(self, message, min_eigenvalue=float("nan"), matrix=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue
        self.matrix = matrix


class NoEventsError(RakesurvError, ValueError):
    """Cox model requested with no (positively weighted) events."""


class NotConvergedError(RakesurvError, RuntimeError):
    """Iterative solver hit its iteration cap."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class StateError(RakesurvError, RuntimeError):
    """Operation requested on an object in the wrong state (e.g. unconverged fit)."""


class SchemaError(RakesurvError, KeyError):
    """A referenced column or role is missing, or a document fails its schema.

    ``violations`` lists the offending JSON paths with messages.
    """

    def __init__(self, message="", violations=()):
        super().__init__(message)
        self.violations = list(violations)

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MaskingError(RakesurvError, PermissionError):
    """Truth columns were requested for subjects that are not validated."""


class RankDeficiencyError(RakesurvError, ValueError):
    """Design or auxiliary matrix is rank deficient."""


class CalibrationFailure(RakesurvError, RuntimeError):
    """Raking weight solve did not satisfy the calibration equations.

    Attributes
    ----------
    worst_constraint : int
        Index of the constraint with the largest absolute residual.
    residual : ndarray
        Final calibration residual vector.
    """

    def __init__(self, message, worst_constraint=-1, residual=None):
        super().__init__(message)
        self.worst_constraint = worst_constraint
        self.residual = residual


class DesignError(RakesurvError, ValueError):
    """Phase-two sampling design cannot be realised."""


class ImputationError(RakesurvError, RuntimeError):
    """Multiple imputation produced an unusable dataset."""


class SeparationWarning(UserWarning):
    """Logistic fit shows signs of (quasi-)complete separation."""
