"""Exception types shared across the package."""


class FlowMapLabError(Exception):
    """Base class for package errors."""


class DomainError(FlowMapLabError, ValueError):
    """Time argument outside the interpolant's domain."""


class SingularTimeError(FlowMapLabError, ValueError):
    """Oracle queried at a time where the noise scale vanishes."""


class DimensionError(FlowMapLabError, ValueError):
    """Mismatched array dimensions."""


class UnsupportedConfigError(FlowMapLabError, ValueError):
    """Configuration combination that the implementation rejects."""


class InvariantViolation(FlowMapLabError, RuntimeError):
    """A checked mathematical invariant failed."""


class ConfigParseError(FlowMapLabError, ValueError):
    """Malformed experiment configuration."""


class TrainingDiverged(FlowMapLabError, RuntimeError):
    """Non-finite loss or gradient encountered during training."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
