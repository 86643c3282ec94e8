"""Exception types shared across the toolkit."""


class BitkitError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(BitkitError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(BitkitError, ArithmeticError):
    """A forward computation produced NaN or Inf."""


class UsageError(BitkitError, ValueError):
    """An API was called in a way its contract does not allow."""


class ValidationError(BitkitError, ValueError):
    """Input data failed a precondition check."""


class ConfigError(BitkitError, ValueError):
    """A model or optimizer configuration is internally inconsistent."""


class DegenerateFilterError(BitkitError, ValueError):
    """A convolution filter has fan-in too small to standardize."""


class StateError(BitkitError, RuntimeError):
    """Optimizer state is missing something the configured mode needs."""


class SamplingError(BitkitError, ValueError):
    """A subsampling request cannot be satisfied by the data."""


class TrainingDivergedError(BitkitError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        self.step = step
        self.lr = lr
        self.grad_norm = grad_norm
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at step {step} (lr={lr:.6g}, grad_norm={grad_norm:.6g})"
        )


class FormatError(BitkitError, ValueError):
    """A binary file does not match its declared format."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")
