"""Exception hierarchy shared across the package.

CLI exit codes map onto these: input/config problems exit 2, training
divergence exits 3, checkpoint incompatibility exits 4, gradient-check
failure exits 5.
"""


class MobIncError(Exception):
    """Base class for all package errors."""


class ShapeError(MobIncError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ValidationError(MobIncError, ValueError):
    """A config, policy, or argument value is out of its allowed range."""


class DataError(MobIncError, ValueError):
    """Dataset layout or record-level problem (bad folder, unreadable file)."""


class ImageFormatError(DataError):
    """Decoded image is not 3-channel RGB."""


class CheckpointError(MobIncError, RuntimeError):
    """Base for checkpoint I/O failures."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint topology hash does not match the target graph."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or malformed."""


class DivergedTrainingError(MobIncError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}: loss={loss}")


class GradientCheckError(MobIncError, RuntimeError):
    """An operation's analytic gradient disagrees with finite differences."""
