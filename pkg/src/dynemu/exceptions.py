"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/input problems -> 2,
domain errors (e.g. querying outside the supported range) -> 3,
numerical failures -> 4.
"""


class EmulationError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(EmulationError):
    """Invalid configuration, file format, or input data."""


class DomainError(EmulationError):
    """Request outside the mathematically supported domain."""


class TimeExtrapolationError(DomainError):
    """Prediction requested outside the training time grid."""


class NumericalError(EmulationError):
    """A numerical procedure failed (factorization, integration, ...)."""


class FactorizationFailure(NumericalError):
    """Gram matrix factorization failed even after jitter escalation."""

    def __init__(self, message, condition_estimate=None):
        super().__init__(message)
        self.condition_estimate = condition_estimate
