"""
Exception types raised by the core modules.
"""
from typing import Optional


class SSMLabError(ValueError):
    """Base class for every error raised on invalid inputs."""


class ShapeMismatchError(SSMLabError):
    """Raised when tensors disagree in shape.

    `step` is the offending timestep for per-step coefficient input,
    `dimension` names the offending axis for weight/input mismatches.
    """

    def __init__(self, message: str, step: Optional[int] = None,
                 dimension: Optional[str] = None):
        super().__init__(message)
        self.step = step
        self.dimension = dimension


class ParameterRangeError(SSMLabError):
    """Raised when a parameter falls outside its admissible range."""


class ModeError(SSMLabError):
    """Raised when discrete-mode coefficients are required but continuous ones were given."""


class NonFiniteError(SSMLabError):
    """Raised when a recorded operation produces inf or nan."""

    def __init__(self, message: str, operation_index: int, op: str):
        super().__init__(message)
        self.operation_index = operation_index
        self.op = op


class UndefinedMetricError(SSMLabError):
    """Raised when a metric is undefined on its input (e.g. all-zero tokens)."""


class TrainingDivergedError(SSMLabError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(SSMLabError):
    """Raised on unreadable or invalid configuration files."""

    def __init__(self, message: str, line: Optional[int] = None,
                 field: Optional[str] = None):
        super().__init__(message)
        self.line = line
        self.field = field
