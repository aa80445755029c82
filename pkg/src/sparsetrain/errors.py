"""Exception hierarchy shared by all modules."""


class SparseTrainError(Exception):
    """Base class for all package errors."""


class ShapeError(SparseTrainError, ValueError):
    pass


class StructuralEditError(SparseTrainError, ValueError):
    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class StaleError(SparseTrainError):
    """A trace or gradient refers to a topology the network no longer has."""


class ProtocolError(SparseTrainError):
    pass


class DataError(SparseTrainError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class CheckpointError(SparseTrainError, OSError):
    pass


class DeadlockError(SparseTrainError, RuntimeError):
    pass
