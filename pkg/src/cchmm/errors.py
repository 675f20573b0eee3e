"""Exception types shared across the package."""


class CchmmError(Exception):
    """Base class for all package errors."""


class ShapeError(CchmmError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(CchmmError):
    """A computation produced NaN or Inf."""


class GradientError(CchmmError):
    """Misuse of the differentiation machinery (bad root, consumed tape, ...)."""


class SingularMatrixError(CchmmError):
    """Pivoted elimination hit a pivot below tolerance."""

    def __init__(self, message: str, pivot: float):
        super().__init__(message)
        self.pivot = pivot


class ValidationError(CchmmError):
    """Input data violates a documented precondition."""


class ConfigError(CchmmError):
    """Invalid, unknown, or conflicting configuration values."""


class BundleFormatError(CchmmError):
    """A dataset/checkpoint directory is missing files or internally inconsistent."""


class TrainingAbort(CchmmError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
