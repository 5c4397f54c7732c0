"""Exception hierarchy shared across the package."""


class GaitQATError(Exception):
    """Base class for every error raised by gaitqat."""


class DimensionError(GaitQATError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(GaitQATError, RuntimeError):
    """An API was called in a state or with arguments it does not support."""


class ConfigError(GaitQATError, ValueError):
    """A configuration object is invalid."""


class NumericError(GaitQATError, ArithmeticError):
    """A non-finite value or an undefined numeric operation was encountered."""


class TrainingError(GaitQATError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class LoweringError(GaitQATError, ValueError):
    """A model cannot be lowered to the integer inference path."""
