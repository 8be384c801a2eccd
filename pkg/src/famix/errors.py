"""Exception types raised across the toolkit."""


class FamixError(Exception):
    """Base class for every error raised by famix."""

    #: short machine-readable tag, used by the CLI error record
    code = "famix-error"


class InvalidInputError(FamixError, ValueError):
    code = "invalid-input"


class ShapeError(FamixError, ValueError):
    code = "shape"


class DomainError(FamixError, ValueError):
    code = "domain"


class PartitionError(FamixError, ValueError):
    code = "partition"


class DegenerateSignalError(FamixError, ValueError):
    code = "degenerate-signal"


class ConfigurationError(FamixError, ValueError):
    code = "configuration"


class BankLoadError(FamixError):
    code = "bank-load"


class MissingStyleError(FamixError, LookupError):
    code = "missing-style"


class DegenerateBatchError(FamixError, ValueError):
    code = "degenerate-batch"


class TrainingDivergenceError(FamixError, FloatingPointError):
    code = "training-divergence"

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class UndefinedMetricError(FamixError, ValueError):
    code = "undefined-metric"
