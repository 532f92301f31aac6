"""Exception types raised by dichotomy_kit."""


class DichotomyKitError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DichotomyKitError, ValueError):
    """Invalid parameters for a space, norm, cocycle or generator."""


class DomainError(DichotomyKitError, ValueError):
    """A numeric argument lies outside the domain of an operation."""


class UsageError(DichotomyKitError, ValueError):
    """An operation was called with incompatible arguments (window mismatch etc.)."""


class PreconditionError(DichotomyKitError):
    """A documented precondition (invertibility, passing certificate, ...) fails."""


class SingularityError(DichotomyKitError, ArithmeticError):
    """A linear map that must be inverted is numerically singular."""

    def __init__(self, message, condition=float("inf")):
        super().__init__(message)
        self.condition = condition


class RecoveryError(DichotomyKitError):
    """Reconstruction (projections, splitting) produced residuals above tolerance."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = dict(residuals or {})


class ShortWindowError(DichotomyKitError):
    """The sampled window is too short to evaluate a quantity to tolerance."""

    def __init__(self, message, required_length=None):
        super().__init__(message)
        self.required_length = required_length
