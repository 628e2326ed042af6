"""Exception types raised by pifnet.

Everything derives from PifnetError so callers can catch framework errors
as one family. Validation-style errors also derive from ValueError.
"""


class PifnetError(Exception):
    """Base class for all pifnet errors."""


class ShapeError(PifnetError, ValueError):
    """Tensor shapes are invalid or incompatible for an operation."""


class RegionBoundsError(ShapeError):
    """A requested hyper-rectangular region falls outside the tensor."""


class PatchTilingError(PifnetError, ValueError):
    """A spatial size is not divisible by the requested patch size."""


class GridConsistencyError(PifnetError, ValueError):
    """Patch grid contents disagree (shapes, counts, or parameter layout)."""


class DegenerateBatchError(PifnetError, ValueError):
    """Batch statistics are undefined (train-mode batch norm on batch of 1)."""


class FormatError(PifnetError, ValueError):
    """A persisted file is malformed. `offset` is the failing byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SubsetError(PifnetError, ValueError):
    """Subsampling collapsed a class out of the dataset."""


class ConfigError(PifnetError, ValueError):
    """An experiment or training configuration is invalid."""


class TrainingDivergedError(PifnetError, RuntimeError):
    """Training produced a non-finite loss. `epoch` is where it happened."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
