class ValidationError(ValueError):
    """Input or file contents violate a documented invariant."""


class NumericError(ArithmeticError):
    """Non-finite values or divergence during a numeric run."""
