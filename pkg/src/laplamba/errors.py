"""Exception hierarchy shared by every laplamba module."""


class LaplambaError(Exception):
    """Base class for all library errors."""


class DimensionError(LaplambaError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class PaddingError(DimensionError):
    """Spatial size does not satisfy the network's divisibility requirement."""


class ConfigError(LaplambaError, ValueError):
    """Invalid configuration or hyperparameter."""


class ContractError(LaplambaError, ValueError):
    """A precondition of an operation was violated."""


class UnsupportedError(LaplambaError, NotImplementedError):
    """Requested feature is deliberately not supported."""


class NonFiniteError(LaplambaError, FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class FormatError(LaplambaError, ValueError):
    """Malformed, truncated, or version-incompatible file."""
