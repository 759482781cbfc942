"""Amortised conditional marginals for bounded probabilistic programs."""

from .errors import DegenerateWeightsError, NumericError, UnimargError, ValidationError

__version__ = "0.1.0"

__all__ = ["DegenerateWeightsError", "NumericError", "UnimargError", "ValidationError", "__version__"]
