class UnimargError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(UnimargError, ValueError):
    """Malformed program, evidence, or configuration."""


class NumericError(UnimargError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DegenerateWeightsError(NumericError):
    """Every importance weight is zero; the evidence is unreachable under the proposal."""
