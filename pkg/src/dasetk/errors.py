"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: data-shaped problems (format, corruption,
shapes, configuration) exit 3, numeric problems (non-finite values, training
divergence, undefined statistics) exit 4.
"""


class DasetkError(Exception):
    """Base class for all toolkit errors."""


class FormatError(DasetkError):
    """File is not in the expected format (bad magic, version, header)."""


class CorruptError(DasetkError):
    """Header and payload disagree (truncation, size mismatch)."""


class ShapeError(DasetkError):
    """Array shapes are incompatible with the requested operation."""


class ConfigError(DasetkError):
    """A configuration object violates its invariants."""


class NumericError(DasetkError):
    """A computation produced or received non-finite values."""


class DivergenceError(NumericError):
    """Training loss became non-finite; the model was rolled back to the
    last finite snapshot before this was raised."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class UndefinedMetricError(NumericError):
    """A statistic has no defined value for the given input (zero-variance
    histogram, single-class AUC, ...)."""
