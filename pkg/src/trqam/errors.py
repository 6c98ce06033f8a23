"""Exception types raised across the package."""


class TrqamError(Exception):
    """Base class for all package errors."""


class ShapeError(TrqamError, ValueError):
    pass


class InvalidArchitectureError(TrqamError, ValueError):
    pass


class UnsupportedOpError(TrqamError, TypeError):
    pass


class NonFiniteGradientError(TrqamError, FloatingPointError):
    pass


class DomainError(TrqamError, ValueError):
    pass


class TrustRegionDomainError(DomainError):
    """Raised when a loss is requested with lambda below the projection floor."""


class NumericalDivergenceError(TrqamError, FloatingPointError):
    """A sampled trajectory left the finite reals.

    ``step`` is the index of the Euler step that produced the bad point.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class AdjointDivergenceError(NumericalDivergenceError):
    pass


class FormatError(TrqamError, ValueError):
    """Corrupt or unrecognized binary file."""


class ConfigError(TrqamError, ValueError):
    pass
