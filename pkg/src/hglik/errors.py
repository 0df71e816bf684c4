"""Exception hierarchy shared by every module of the package."""


class HglikError(Exception):
    """Base class for all package errors."""


class ConfigError(HglikError, ValueError):
    pass


class ColumnError(ConfigError):
    def __init__(self, column):
        super().__init__(f"unknown column: {column!r}")
        self.column = column


class DesignError(HglikError, ValueError):
    pass


class EvaluationError(HglikError, ArithmeticError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class DomainError(HglikError, ValueError):
    pass


class NumericalError(HglikError, ArithmeticError):
    """A linear system could not be factorized; ``block`` names the culprit."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class CurvatureError(NumericalError):
    pass


class ConvergenceError(HglikError, RuntimeError):
    """Iteration limit reached; carries the last iterate and its gradient norm."""

    def __init__(self, message, state=None, grad_norm=float("nan")):
        super().__init__(f"{message} (gradient norm {grad_norm:.3g})")
        self.state = state
        self.grad_norm = grad_norm


class SimulationError(HglikError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
