"""Exponential dichotomies of linear cocycles via invertibility of difference operators."""

from .errors import (
    ConfigurationError,
    DichotomyKitError,
    DomainError,
    PreconditionError,
    RecoveryError,
    ShortWindowError,
    SingularityError,
    UsageError,
)

__version__ = "0.1.0"
