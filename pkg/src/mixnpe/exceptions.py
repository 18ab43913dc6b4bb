"""Exception hierarchy shared across the package."""


class MixnpeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MixnpeError, ValueError):
    """Invalid architecture, schema, or training configuration."""


class InputError(MixnpeError, ValueError):
    """Invalid user-supplied data (shapes, ranges, non-finite values)."""


class TrainingError(MixnpeError, RuntimeError):
    """Training aborted, e.g. because a loss became non-finite."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CapabilityError(MixnpeError, RuntimeError):
    """The requested exact computation is too large; use a Monte Carlo variant."""


class StabilityError(MixnpeError, ValueError):
    """Queue parameters with traffic intensity >= 1."""


class ReferenceInvalidError(MixnpeError, RuntimeError):
    """A Monte Carlo reference posterior failed its validity diagnostics."""


class CheckpointError(MixnpeError, IOError):
    """Corrupted, truncated, or incompatible checkpoint file."""
