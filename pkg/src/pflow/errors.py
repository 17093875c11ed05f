"""Exception hierarchy shared by every module of the package."""


class PflowError(Exception):
    """Base class for all package errors."""


class ValidationError(PflowError, ValueError):
    """Input failed a precondition check."""


class NumericalError(PflowError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class NonConvergence(NumericalError):
    pass


class DefectiveMatrix(NumericalError):
    """Eigenvector matrix too ill-conditioned to form a usable basis."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class LanczosBreakdown(NumericalError):
    pass


class UnsupportedComplexDomain(PflowError, TypeError):
    pass


class DenseCapExceeded(PflowError, MemoryError):
    pass


class ZeroGradient(NumericalError):
    pass


class NoMinimizerAlongRay(NumericalError):
    pass


class Singular(NumericalError):
    """A principal-flow coefficient is unbounded (h * lambda == 1)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class Divergence(NumericalError):
    pass
