"""Exception types raised by the solver."""


class GLMMLassoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GLMMLassoError, ValueError):
    """Inputs violate a documented precondition (domain, shape, schema)."""


class ConvergenceError(GLMMLassoError):
    """An iterative routine hit its iteration budget.

    The last iterate is kept on ``state`` so callers can inspect or reuse it.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class NumericalError(GLMMLassoError, ArithmeticError):
    """Non-finite values or a failed factorization."""


class UnsupportedModelError(GLMMLassoError, NotImplementedError):
    """The requested model structure is outside what a routine handles."""
