"""Exception hierarchy shared by every shrinkforge module."""


class ShrinkforgeError(Exception):
    """Base class for all errors raised by the toolkit."""


class ShapeError(ShrinkforgeError, ValueError):
    """An operator received tensors whose shapes do not line up."""

    def __init__(self, layer, message):
        self.layer = layer
        super().__init__(f"[{layer}] {message}" if layer else message)


class SpecError(ShrinkforgeError, ValueError):
    """A network spec is malformed or its layer shapes do not chain."""


class CheckpointError(ShrinkforgeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointInconsistentError(CheckpointError):
    pass


class PartitionError(ShrinkforgeError, ValueError):
    pass


class PruneError(ShrinkforgeError):
    """Structure extraction is impossible, e.g. a stage lost every channel."""


class NumericalError(ShrinkforgeError):
    """Non-finite values showed up in gradients or the loss."""


class CompatibilityError(ShrinkforgeError):
    """Teacher and student (or checkpoint and data) disagree on shapes."""


class ConfigError(ShrinkforgeError, ValueError):
    pass


class DataError(ShrinkforgeError):
    pass


class IdxMagicError(DataError):
    pass


class IdxDimensionError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass
