"""Exception hierarchy.

Every error raised by the library derives from :class:`ElgmError`; the CLI
prints the class name as a single machine-parseable token.
"""


class ElgmError(Exception):
    """Base class for all library errors."""


class InvalidOrderError(ElgmError, ValueError):
    pass


class GridCapacityError(ElgmError, ValueError):
    pass


class FactorizationError(ElgmError, ValueError):
    pass


class NotPositiveDefiniteError(FactorizationError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class DegeneratePosteriorError(ElgmError):
    pass


class InvalidStartError(ElgmError, ValueError):
    pass


class EvaluationError(ElgmError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class InnerNonConvergenceError(ElgmError):
    def __init__(self, message, theta=None, iterations=None, grad_norm=None):
        super().__init__(message)
        self.theta = theta
        self.iterations = iterations
        self.grad_norm = grad_norm


class OuterNonConvergenceError(ElgmError):
    pass


class ModelError(ElgmError, ValueError):
    pass


class DimensionCapError(ElgmError, ValueError):
    pass


class DataError(ElgmError, ValueError):
    pass


class ConfigError(ElgmError, ValueError):
    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class ValidationFailure(ElgmError):
    pass
