"""Exception taxonomy shared across the library.

Every exception doubles as a builtin (ValueError / OSError / RuntimeError)
so callers that don't know about this package still behave sensibly.
"""


class ImplantDepthError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ImplantDepthError, ValueError):
    """A configuration value violates its documented constraints."""


class ShapeError(ImplantDepthError, ValueError):
    """An array shape violates an operation's contract."""


class VolumeFormatError(ImplantDepthError, OSError):
    """A volume directory is missing, truncated or inconsistent."""


class CheckpointError(ImplantDepthError, OSError):
    """A checkpoint container is missing, corrupt or incompatible."""


class TrainingDiverged(ImplantDepthError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, step: int, epoch: int, sample_ids, value: float):
        self.step = step
        self.epoch = epoch
        self.sample_ids = list(sample_ids)
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at step {step} (epoch {epoch}), "
            f"batch samples {self.sample_ids}"
        )
