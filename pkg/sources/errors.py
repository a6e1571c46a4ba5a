"""
Exception hierarchy shared by every module.

All errors raised on purpose derive from RPE2DError so the command line can
report them cleanly and exit with a nonzero status.
"""


class RPE2DError(Exception):
    """Root of all toolkit errors."""


class ConfigError(RPE2DError, ValueError):
    """Invalid configuration value, usually prefixed with its dotted key path."""

    def __init__(self, message: str, key: str = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class CapacityError(RPE2DError, ValueError):
    """More positions requested than the maximum position range provides."""


class DimensionError(RPE2DError, ValueError):
    """Tensor shapes do not agree."""


class InputError(RPE2DError, ValueError):
    """Bad user data: images, labels, timesteps, sample sets."""


class NonFiniteError(RPE2DError, FloatingPointError):
    """A gradient, loss or sampler state stopped being finite."""


class CheckpointError(RPE2DError, IOError):
    """Checkpoint file is corrupted, truncated or of a foreign format."""
