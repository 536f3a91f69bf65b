class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class NumericalFault(ArithmeticError):
    """Non-finite value detected during simulation or optimization (CLI exit code 3)."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step
