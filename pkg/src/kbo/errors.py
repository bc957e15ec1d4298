"""Exception hierarchy shared by all modules."""


class KboError(Exception):
    """Base class for every error raised by this package."""


class InputError(KboError, ValueError):
    """Malformed arguments: wrong shapes, empty inputs, invalid parameters."""


class NumericInputError(InputError):
    """NaN or infinite values where finite numbers are required."""


class SingularityError(KboError, ArithmeticError):
    """A matrix that must be factorized is not numerically invertible."""


class ConvergenceError(KboError, RuntimeError):
    """An iterative solver ran out of iterations.

    The last residual norm is kept on ``residual`` for diagnostics.
    """

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class ContractViolation(KboError):
    """A precondition on a loss or problem (e.g. convexity) does not hold."""


class ConfigError(InputError):
    """Invalid or unknown configuration entries."""
