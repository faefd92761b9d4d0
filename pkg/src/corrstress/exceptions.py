"""Exception hierarchy shared by all stages."""


class CorrStressError(Exception):
    """Base class for package errors."""


class ValidationError(CorrStressError, ValueError):
    """Input violates a documented precondition."""


class NumericalError(CorrStressError, ArithmeticError):
    """A numerical stage could not produce a trustworthy result."""


class CalibrationError(NumericalError):
    """Pair design stayed rank-deficient after pruning.

    Attributes
    ----------
    pruned : list of str
        Column names removed before giving up, in pruning order.
    """

    def __init__(self, message, pruned=()):
        super().__init__(message)
        self.pruned = list(pruned)


class SingularCovarianceError(NumericalError):
    pass


class IngestError(CorrStressError, OSError):
    """Input file missing, unreadable or malformed."""
