"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` (and subclasses) to exit code 1 and
``OSError`` to exit code 2.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes do not line up."""


class ParameterError(ValidationError):
    """A hyperparameter is outside its legal range."""


class UsageError(ValidationError):
    """An API was called in a way it does not support."""


class UndefinedMetricError(ValidationError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class DegenerateError(ValidationError):
    """Data is degenerate for the requested computation."""


class LeakageError(ValidationError):
    """A fitted statistic would see test-fold samples."""
