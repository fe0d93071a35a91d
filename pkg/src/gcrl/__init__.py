"""Tabular Q-learning regularised by learned symmetries and preference orders."""

from .errors import ConfigError, CorrectionError, DimensionError, NumericError
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigError", "CorrectionError", "DimensionError", "NumericError", "__version__"]
