"""Exception types shared across the package."""


class FaldaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FaldaError):
    """Array dimensions do not satisfy an operation's contract."""


class ConfigError(FaldaError):
    """A configuration value (or combination) is invalid."""


class DataError(FaldaError):
    """Input data could not be parsed or is structurally unusable."""


class RangeError(FaldaError):
    """A step index or similar argument lies outside its legal range."""


class EnsembleError(FaldaError):
    """A forecast ensemble is too small for the requested metric."""


class DivergenceError(FaldaError):
    """Training produced a non-finite loss."""
