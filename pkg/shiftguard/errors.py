"""
Exception Hierarchy.

Every failure raised by the toolkit derives from ShiftGuardError and carries a
human-readable ``detail`` plus the structured attributes callers need to react
(fall back to the baseline policy, map to an exit code, report diagnostics).
"""

from typing import Any, Dict, Optional


class ShiftGuardError(Exception):
    """Base class for all toolkit errors."""

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class DimensionMismatchError(ShiftGuardError, ValueError):
    """Vector or matrix sizes disagree."""


class DomainError(ShiftGuardError, ValueError):
    """Argument outside its mathematical domain."""


class InvalidDistributionError(ShiftGuardError, ValueError):
    """Covariance or shape matrix is not symmetric / not (semi)definite."""


class IllConditionedCovarianceError(InvalidDistributionError):
    """Covariance is singular or numerically indefinite."""

    def __init__(self, detail: str, eigenvalue: float):
        super().__init__(detail)
        self.eigenvalue = eigenvalue


class ModelFormatError(ShiftGuardError):
    """Model file cannot be parsed or does not describe a valid network."""


class ModelVersionError(ModelFormatError):
    """Model file declares an unsupported format_version."""

    def __init__(self, detail: str, version: Any):
        super().__init__(detail)
        self.version = version


class TrainingError(ShiftGuardError):
    """Training cannot start or cannot continue."""


class TrainingDivergedError(TrainingError):
    """Training loss became non-finite."""

    def __init__(
        self,
        detail: str,
        epoch: int,
        last_finite_loss: Optional[float],
        learning_rate: float
    ):
        super().__init__(detail)
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss
        self.learning_rate = learning_rate


class NotReluNetworkError(ShiftGuardError, ValueError):
    """Semidefinite relaxation requested on a network with non-ReLU hidden layers."""


class SolverError(ShiftGuardError):
    """Conic backend failed numerically."""

    def __init__(self, detail: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.diagnostics = diagnostics or {}


class CertificationError(SolverError):
    """Bounding program is infeasible or unbounded, so no bound is certified."""

    def __init__(
        self,
        detail: str,
        status: str,
        diagnostics: Optional[Dict[str, Any]] = None
    ):
        super().__init__(detail, diagnostics)
        self.status = status


class AdaptationUnavailableError(ShiftGuardError):
    """The adaptation program produced no action; callers fall back to pi*."""

    def __init__(
        self,
        detail: str,
        status: str,
        diagnostics: Optional[Dict[str, Any]] = None
    ):
        super().__init__(detail)
        self.status = status
        self.diagnostics = diagnostics or {}


class ConfigError(ShiftGuardError):
    """Configuration file is missing, malformed or has unknown keys."""


class PlotInputError(ShiftGuardError):
    """Episode CSV handed to the plotter is empty or lacks a column."""

    def __init__(self, detail: str, column: Optional[str] = None):
        super().__init__(detail)
        self.column = column
