"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so new failure modes should
subclass one of the four families below (config, data, calibration, io).
"""


class PiboundError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PiboundError):
    """A specification, rule, or config document violates its invariants."""


class DataError(PiboundError):
    """Malformed or inconsistent input data (CSV cells, dimensions, lengths)."""


class DivergenceError(PiboundError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


class SerializationError(PiboundError):
    """Unreadable, truncated, or version-incompatible serialized artifact."""


class CalibrationError(PiboundError):
    """Base class for calibration failures."""


class OneSidedResidualsError(CalibrationError):
    """Every residual fell on one side; the empty side has no training data."""

    def __init__(self, empty_side: str):
        self.empty_side = empty_side
        super().__init__(f"one-sided residuals: the '{empty_side}' side is empty")


class FingerprintMismatchError(CalibrationError):
    """Artifacts derived from different model parameters were combined."""


class BracketingError(CalibrationError):
    """Bisection could not bracket a sign change within its doubling budget."""


class NonMonotoneError(CalibrationError):
    """The counting function increased where it must be non-increasing."""
