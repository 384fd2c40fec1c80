"""Library exceptions."""

__all__ = (
    "HistoSegError",
    "ShapeError",
    "ConfigError",
    "GradientError",
    "NonFiniteLossError",
    "DatasetError",
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointShapeError",
)


class HistoSegError(Exception):
    """Base class for every error raised by this library."""


class ShapeError(HistoSegError, ValueError):
    """Tensor extents do not fit the operation."""


class ConfigError(HistoSegError, ValueError):
    """A configuration or spec value is out of range or unknown."""


class GradientError(HistoSegError, ValueError):
    """Backward pass or optimizer step cannot proceed."""


class NonFiniteLossError(HistoSegError, ArithmeticError):
    """Training produced a NaN or infinite loss."""


class DatasetError(HistoSegError, ValueError):
    """A dataset file or directory is missing or ill-formed."""


class CheckpointError(HistoSegError, ValueError):
    """A checkpoint file cannot be read or does not fit the model."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared content was read."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the model it is loaded into."""
