"""Exception types shared across the package."""


class SceneMoEError(Exception):
    """Base class for all package errors."""


class DimensionError(SceneMoEError, ValueError):
    pass


class DomainError(SceneMoEError, ValueError):
    pass


class ConfigError(SceneMoEError, ValueError):
    pass


class EvaluationError(SceneMoEError, ArithmeticError):
    """A function under evaluation produced a non-finite value."""


class TrainingDivergence(SceneMoEError, RuntimeError):
    """Raised when a training step produces a non-finite loss.

    ``record`` holds the offending step's log record for diagnostics.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class BudgetExceeded(SceneMoEError, ValueError):
    pass
