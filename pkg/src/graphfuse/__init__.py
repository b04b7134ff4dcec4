"""Multimodal skeleton-graph fusion and adaptive graph convolutional classification."""

from .errors import ConfigError, DataError, GraphFuseError, ShapeError, UsageError
from .tensor import Precision, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "GraphFuseError",
    "Precision",
    "ShapeError",
    "Tensor",
    "UsageError",
    "no_grad",
]
