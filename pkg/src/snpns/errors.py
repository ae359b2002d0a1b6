"""Exception hierarchy shared by all modules."""


class SnpnsError(Exception):
    """Base class for every error raised by the package."""


class DomainMismatchError(SnpnsError, ValueError):
    """Operation called on a grid of the wrong domain, or on mixed grids."""


class PreconditionError(SnpnsError, ValueError):
    """Input violates a documented precondition."""


class SolverError(SnpnsError, RuntimeError):
    """An iterative solver failed to converge."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StepRejectedError(SnpnsError, RuntimeError):
    """A time step could not be taken (CFL or positivity)."""


class BlowUpError(SnpnsError, RuntimeError):
    """Non-finite values appeared in the state."""

    def __init__(self, message, step_index=None):
        super().__init__(message)
        self.step_index = step_index


class ConfigError(SnpnsError, ValueError):
    """Invalid or inconsistent run configuration."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnderpoweredError(SnpnsError, ValueError):
    """Too few samples for a meaningful statistic."""
