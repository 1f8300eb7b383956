"""Exception hierarchy shared by the simulation and analysis layers."""


class QPurifyError(Exception):
    """Base class for all package errors."""


class ValidationError(QPurifyError, ValueError):
    """Bad input: dimension, range, or configuration problem."""


class InvalidDimensionError(ValidationError):
    pass


class ConsistencyError(QPurifyError, ArithmeticError):
    """A quantity that must be real/hermitian/unit-trace was not."""


class NumericalError(QPurifyError, ArithmeticError):
    """A numerical procedure failed (step size, quadrature, root bracketing)."""


class StepSizeError(NumericalError):
    pass


class QuadratureError(NumericalError):
    pass


class RootBracketError(NumericalError):
    pass


class CapabilityError(ValidationError):
    """Requested an algorithm variant outside its supported range."""
