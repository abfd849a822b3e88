"""Exception types shared across the package."""


class MaesegError(Exception):
    """Base class for all package errors."""


class ConfigError(MaesegError, ValueError):
    """Invalid configuration value or combination of values."""


class ShapeError(MaesegError, ValueError):
    """Array or grid shapes do not agree."""


class NumericError(MaesegError, FloatingPointError):
    """Non-finite values appeared in a forward pass or loss."""


class PhantomError(MaesegError, RuntimeError):
    """A synthetic phantom came out degenerate."""


class AugmentationError(MaesegError, RuntimeError):
    """Augmentation pushed the foreground out of the volume."""


class TrainingError(MaesegError, RuntimeError):
    """Training aborted (for instance on a non-finite loss)."""


class MetricError(MaesegError, ValueError):
    """A metric is undefined for the given masks."""
