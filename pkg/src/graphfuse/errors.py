"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ``ConfigError`` -> 1, ``DataError`` -> 2.
"""


class GraphFuseError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(GraphFuseError, ValueError):
    """Tensor dimensions are incompatible with an operation."""


class ConfigError(GraphFuseError, ValueError):
    """A configuration value, plan, or spec is invalid."""


class DataError(GraphFuseError, ValueError):
    """Input data is malformed or inconsistent."""


class UsageError(GraphFuseError, RuntimeError):
    """An API was called in a way it does not support."""
