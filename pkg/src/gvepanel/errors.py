"""Exception hierarchy shared across the package."""


class GvePanelError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(GvePanelError):
    """Malformed input (bad indices, inconsistent shapes, bad config)."""


class OverlapError(GvePanelError):
    """Partition index sets intersect."""


class SizeError(GvePanelError):
    """Partition index sets are too small or not divisible as required."""


class RankError(GvePanelError):
    """A linear system is singular or numerically rank deficient.

    Carries the estimated condition number of the offending matrix.
    """

    def __init__(self, message: str, cond: float = float("inf")):
        super().__init__(message)
        self.cond = cond


class ZeroDenominatorError(GvePanelError):
    """A ratio estimator's denominator is indistinguishable from zero."""


class ConvergenceError(GvePanelError):
    """An iterative solver exhausted its iteration budget."""


class WeightSumError(GvePanelError):
    """Combination weights do not sum to the identity."""


class CapacityError(GvePanelError):
    """An enumeration would overflow a 64-bit count; pass a cap."""


class UnbalancedError(GvePanelError):
    """Long-format input does not pivot to a balanced panel.

    ``missing`` lists the absent (subject, group) pairs.
    """

    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class ParseError(GvePanelError):
    """A CSV cell could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int = -1):
        super().__init__(message)
        self.line = line


class DuplicateError(GvePanelError):
    """A (subject, group) pair appears more than once in the input."""
