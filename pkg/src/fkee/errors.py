"""Exception types shared across the package."""


class FKEEError(Exception):
    pass


class ConfigError(FKEEError, ValueError):
    """Inconsistent dimensions, bad keys, off-grid times and similar setup mistakes."""


class NumericError(FKEEError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class SimulationDiverged(NumericError):
    def __init__(self, step, message=None):
        super().__init__(message or f"non-finite state at step {step}")
        self.step = step


class CheckpointVersionError(FKEEError):
    pass
