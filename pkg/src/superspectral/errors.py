"""Exception types shared across the package.

The CLI maps these onto stable exit codes (config 2, data 3, numerical 4),
so library code should raise the most specific class that applies.
"""


class SuperspectralError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SuperspectralError):
    """Invalid configuration: bad schema, unknown keys, inconsistent values."""


class DataError(SuperspectralError):
    """Invalid data: malformed files, inconsistent shapes or metadata."""


class ShapeError(DataError):
    """Array shape inconsistent with the declared layer or stack geometry."""


class NumericalError(SuperspectralError):
    """Numerical failure: divergence, degeneracy, no model found."""


class NonFiniteGradientError(NumericalError):
    """An optimizer step received NaN or infinite gradients."""


class EstimationError(NumericalError):
    """A geometric estimation problem had no acceptable solution."""


class InsufficientDataError(EstimationError):
    """Fewer samples than the estimator's minimal set."""
