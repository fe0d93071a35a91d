"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not agree."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed to make progress."""


class CorrectionError(RuntimeError):
    """Fallback constraint correction did not converge."""

    def __init__(self, message: str, residual_norm: float):
        super().__init__(message)
        self.residual_norm = residual_norm


class ConfigError(ValueError):
    """Invalid experiment or learner configuration."""
