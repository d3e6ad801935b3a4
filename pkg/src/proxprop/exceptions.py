"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class NumericalBreakdown(ArithmeticError):
    """A non-finite value appeared inside an iterative solver."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class FactorizationError(ArithmeticError):
    """Symmetric factorization failed (matrix not positive definite)."""


class ConsistencyError(ValueError):
    """A forward cache does not match the network it is used with."""


class FormatError(ValueError):
    """Malformed dataset file."""


class ConfigError(ValueError):
    """Inconsistent training configuration."""
