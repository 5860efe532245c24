"""
Exception hierarchy of the package.

Every error raised on purpose by :mod:`tscps` derives from :class:`TscpsError`, and most of them also derive from the matching builtin (``ValueError``, ``ArithmeticError``, ...) so callers that only know the builtins still catch them.
"""
from typing import Any


class TscpsError(Exception):
    """
    Base class for all errors raised by the package.
    """
    pass


class ScheduleError(TscpsError, ValueError):
    """
    Raised for invalid diffusion schedules, penalty parameters or step indices.
    """
    pass


class ShapeMismatchError(TscpsError, ValueError):
    """
    Raised when arrays that must share a shape (sample, noise, denoiser metadata) do not.
    """
    pass


class DatasetError(TscpsError, ValueError):
    """
    Raised for empty datasets, constant channels and missing normalization records.
    """
    pass


class DatasetParseError(DatasetError):
    """
    Raised when a CSV file cannot be parsed into a dataset.

    :ivar row: 1-based line of the offending cell in the file, if known.
    :vartype row: int | None
    :ivar column: 1-based column of the offending cell, if known.
    :vartype column: int | None
    """

    def __init__(self, message: str, row: int | None = None, column: int | None = None) -> None:
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column {column}")
        if location:
            message = f"{message} (at {', '.join(location)})"
        super().__init__(message)
        self.row: int | None = row
        self.column: int | None = column


class ConstraintError(TscpsError, ValueError):
    """
    Raised for malformed constraint descriptors or constraint sets.
    """
    pass


class UnsupportedCompilationError(ConstraintError):
    """
    Raised when a constraint cannot be written as affine rows.

    :ivar constraint_name: Name of the constraint that blocked compilation.
    :vartype constraint_name: str
    """

    def __init__(self, constraint_name: str, reason: str) -> None:
        super().__init__(
            f"Constraint '{constraint_name}' cannot be compiled to an affine system: {reason}")
        self.constraint_name: str = constraint_name


class NumericalFailureError(TscpsError, ArithmeticError):
    """
    Raised when a NaN or infinite value appears in a trajectory or an objective.

    :ivar step: The denoising step (or iteration) at which the failure was detected, if known.
    :vartype step: int | None
    """

    def __init__(self, message: str, step: int | None = None) -> None:
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step: int | None = step


class TrainingDivergenceError(NumericalFailureError):
    """
    Raised when the training loss stops being finite.

    :ivar checkpoint: Parameters of the last iteration whose loss was finite.
    :vartype checkpoint: dict[str, numpy.ndarray]
    :ivar iteration: The iteration that produced the non-finite loss.
    :vartype iteration: int
    """

    def __init__(self, iteration: int, checkpoint: dict[str, Any]) -> None:
        super().__init__("Training diverged: loss is not finite", step=iteration)
        self.iteration: int = iteration
        self.checkpoint: dict[str, Any] = checkpoint


class CheckpointError(TscpsError, ValueError):
    """
    Raised for unreadable, corrupt or incompatible checkpoint files.
    """
    pass


class ConfigError(TscpsError, ValueError):
    """
    Raised for unknown configuration keys and invalid configuration values.
    """
    pass


class AcceptanceError(TscpsError, AssertionError):
    """
    Raised when a numerical verification (bound, norm lemma) fails.

    :ivar dump: Everything needed to reproduce the failure (instance, schedule, trace).
    :vartype dump: dict[str, Any]
    """

    def __init__(self, message: str, dump: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.dump: dict[str, Any] = dump or {}
