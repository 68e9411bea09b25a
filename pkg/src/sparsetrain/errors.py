"""Exception hierarchy shared across the package."""


class SparseTrainError(Exception):
    """Base class for all package errors."""


class ShapeError(SparseTrainError, ValueError):
    """Tensor or layer shapes are inconsistent."""


class IntegrityError(SparseTrainError):
    """A sparsity index does not describe the tensor it is paired with."""


class ConfigError(SparseTrainError, ValueError):
    """Invalid node, model or energy configuration."""


class TrainingDivergence(SparseTrainError, RuntimeError):
    """The loss became non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TraceFormatError(SparseTrainError, ValueError):
    """Malformed trace file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MissingOperandError(SparseTrainError, ValueError):
    """A scenario needs an operand or index that was not supplied."""
