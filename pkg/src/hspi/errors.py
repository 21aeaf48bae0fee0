"""Exception types shared across the package."""


class HSPIError(Exception):
    """Base class for all package errors."""


class ShapeError(HSPIError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class NonFiniteError(HSPIError, FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


class ConfigError(HSPIError, ValueError):
    """A configuration value violates its documented constraints."""


class CheckpointError(HSPIError):
    """A checkpoint file is truncated or otherwise unreadable."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint file was written with an unsupported format version."""
