"""
Custom exceptions for condfuse.
"""


class CondFuseError(Exception):
    """Base exception for condfuse."""

    def __init__(self, message: str, details: dict = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigurationError(CondFuseError):
    """Raised when there's a configuration error."""
    pass


class ValidationError(CondFuseError):
    """Raised when a domain value fails validation."""

    def __init__(self, message: str, field: str = None, value: any = None, details: dict = None):
        super().__init__(message, details)
        self.field = field
        self.value = value


class ShapeError(CondFuseError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, op: str = None, shapes: tuple = ()):
        shapes = tuple(tuple(s) for s in shapes)
        if op is not None:
            rendered = ", ".join(str(s) for s in shapes)
            message = f"{op}: {message} (shapes: {rendered})"
        super().__init__(message, {"op": op, "shapes": shapes})
        self.op = op
        self.shapes = shapes


class NumericalError(CondFuseError):
    """Raised when a computation produces non-finite or degenerate values."""
    pass


class GradientError(NumericalError):
    """Raised when a gradient cannot be computed."""

    def __init__(self, message: str, index: tuple = None):
        super().__init__(message, {"index": index})
        self.index = index


class TrainingDivergedError(NumericalError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message: str, step: int = None):
        super().__init__(message, {"step": step})
        self.step = step


class FormatError(CondFuseError):
    """Raised when a binary file is corrupt or truncated."""

    def __init__(self, message: str, offset: int = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, {"offset": offset})
        self.offset = offset


class DatasetFormatError(FormatError):
    """Raised when a dataset file cannot be read."""
    pass


class CheckpointFormatError(FormatError):
    """Raised when a checkpoint file cannot be read."""
    pass
