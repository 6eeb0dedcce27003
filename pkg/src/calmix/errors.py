"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, bad values, mismatched shapes."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be loaded into the requested model."""


class CorruptCheckpointError(CheckpointError):
    """A checkpoint blob failed its integrity check."""


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
