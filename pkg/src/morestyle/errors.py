class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, message, config=None):
        super().__init__(message)
        self.config = config
