"""Exception types shared across the package."""


class ConformalSDEError(Exception):
    pass


class InvalidArgument(ConformalSDEError, ValueError):
    pass


class DomainError(ConformalSDEError, ValueError):
    """State left the model's domain (e.g. non-positive Lotka-Volterra coordinate)."""


class ConfigError(ConformalSDEError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StepDiverged(ConformalSDEError, RuntimeError):
    """Fixed-point iteration of an implicit step did not converge."""

    def __init__(self, message, step=None, rows=None):
        self.step = step
        self.rows = rows
        super().__init__(message)


class InsufficientData(ConformalSDEError, ValueError):
    pass
