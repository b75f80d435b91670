"""Exception types shared across the package."""


class DatError(Exception):
    """Base class for all package errors."""


class DimensionError(DatError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ParameterError(DatError, ValueError):
    """A scalar or structural parameter is out of its legal range."""


class ConfigError(DatError, ValueError):
    """A model or layer configuration violates one of its invariants."""


class PrecisionError(DatError, TypeError):
    """An operation that requires float64 received another dtype."""


class NonFiniteError(DatError, ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""
