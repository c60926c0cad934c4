"""Exception types raised across the package."""


class BQPGError(Exception):
    """Base class for all package errors."""


class DimensionError(BQPGError, ValueError):
    """Operand shapes do not agree."""


class NumericalBreakdown(BQPGError, ArithmeticError):
    """A solver produced non-finite values or a factorization failed."""


class OracleCapExceeded(BQPGError):
    """Dense materialization was requested above the configured size cap."""


class InputError(BQPGError, ValueError):
    """Non-finite or otherwise invalid numerical input."""


class SpectrumError(BQPGError, ArithmeticError):
    """A truncated spectrum cannot be used (non-positive eigenvalue)."""


class ConfigError(BQPGError, ValueError):
    """Invalid experiment or environment configuration."""


class EstimatorError(BQPGError):
    """Gradient estimation failed; carries the solver residual report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
