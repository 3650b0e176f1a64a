"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A model or run parameter is outside its valid range."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DomainError(ValueError):
    """A function was evaluated outside its domain (e.g. non-PD precision)."""


class DivergenceError(FloatingPointError):
    """Non-finite values appeared during an iteration."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class NumericalError(ArithmeticError):
    """A matrix expected to be PSD is not, beyond the clamping tolerance."""

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class GridRangeError(RuntimeError):
    """A root or extremum search found no bracket on the supplied grid."""
