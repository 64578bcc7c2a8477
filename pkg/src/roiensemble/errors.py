"""Exception hierarchy shared by every module of the package."""


class RoiEnsembleError(Exception):
    pass


class ShapeError(RoiEnsembleError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InvalidArgumentError(RoiEnsembleError, ValueError):
    pass


class InvalidStateError(RoiEnsembleError, RuntimeError):
    pass


class SpecError(RoiEnsembleError, ValueError):
    """An architecture spec violates its invariants."""


class CheckpointError(RoiEnsembleError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DivergedError(RoiEnsembleError, ArithmeticError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class IncompatibleEnsembleError(RoiEnsembleError, ValueError):
    pass


class UnsupportedFormatError(RoiEnsembleError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InvalidAnnotationError(RoiEnsembleError, ValueError):
    pass


class InvalidSplitError(RoiEnsembleError, ValueError):
    pass


class DataInconsistencyError(RoiEnsembleError, ValueError):
    pass
