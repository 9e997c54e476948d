"""Exception hierarchy shared by every module."""


class DSSPruneError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DSSPruneError, ValueError):
    """Tensor dimensions do not agree."""


class ConfigError(DSSPruneError, ValueError):
    """Invalid hyperparameter, layer configuration or config file."""


class InputError(DSSPruneError, ValueError):
    """Invalid argument value (labels, layer ids, ratios, ...)."""


class FormatError(DSSPruneError, ValueError):
    """Malformed or truncated file / byte stream."""


class StateError(DSSPruneError, RuntimeError):
    """Operation invoked in the wrong state (no tape, missing grad, stale plan)."""


class RunError(DSSPruneError, RuntimeError):
    """A training or pipeline stage failed."""

    def __init__(self, message: str, stage: str | None = None, epoch: int | None = None):
        super().__init__(message)
        self.stage = stage
        self.epoch = epoch
