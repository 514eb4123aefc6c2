"""Exception types raised across the package."""


class CollapseLabError(Exception):
    """Base class for all package errors."""


class DimensionError(CollapseLabError, ValueError):
    """Array shapes are inconsistent with the requested operation."""


class NumericalFailure(CollapseLabError, ArithmeticError):
    """An iterative routine did not converge or produced non-finite values."""


class DegenerateInputError(CollapseLabError, ValueError):
    """Input is degenerate for the requested quantity (zero matrix, rank loss)."""


class UnsupportedLossError(CollapseLabError, ValueError):
    """The loss family does not support the requested operation."""


class NotStrictSaddleError(CollapseLabError, ValueError):
    """A negative-curvature direction was requested where none is guaranteed."""


class DivergenceError(NumericalFailure):
    """Training produced a non-finite objective."""

    def __init__(self, iteration, value):
        self.iteration = iteration
        self.value = value
        super().__init__(f"objective became non-finite ({value}) at iteration {iteration}")


class ConfigError(CollapseLabError, ValueError):
    """A run configuration is malformed or requests an unsupported setup."""
