"""Deformable attention transformer: numerics, cost model and toy harness."""

from datkit.errors import (
    ConfigError,
    DatError,
    DimensionError,
    NonFiniteError,
    ParameterError,
    PrecisionError,
)
from datkit.tensor import Tensor, backward, no_grad

__all__ = [
    "ConfigError",
    "DatError",
    "DimensionError",
    "NonFiniteError",
    "ParameterError",
    "PrecisionError",
    "Tensor",
    "backward",
    "no_grad",
]
