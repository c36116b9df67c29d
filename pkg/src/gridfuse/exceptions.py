"""Exception types shared across the package."""


class GridfuseError(Exception):
    """Base class for all package errors."""


class CaseFormatError(GridfuseError):
    """Raised when a grid case file cannot be parsed or is inconsistent."""


class ScenarioError(GridfuseError):
    """Raised when a scenario configuration is invalid."""


class ConvergenceError(GridfuseError):
    """Raised when an iterative solve fails to converge."""

    def __init__(self, message, residual_norm=None, iterations=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations
