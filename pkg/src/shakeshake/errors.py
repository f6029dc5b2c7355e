"""Exception hierarchy shared by every module."""


class ShakeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ShakeError, ValueError):
    """Invalid shapes, hyperparameters or model/config combinations."""


class UsageError(ShakeError, RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class FormatError(ShakeError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class NonFiniteError(ShakeError, ArithmeticError):
    """A forward operation produced NaN or Inf."""


class UndefinedCorrelationError(ShakeError, ArithmeticError):
    """Correlation requested for a stream with zero variance or n < 2."""


class DivergenceError(ShakeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, epoch: int, step: int, reason: str):
        self.epoch = epoch
        self.step = step
        self.reason = reason
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {reason}")
