"""Exception hierarchy shared across the package.

Two broad failure classes are distinguished so that callers (notably the CLI)
can separate user errors from numerical failures: ``DomainError`` signals a
violated precondition or invalid input, everything else derives from
``NumericalError``.
"""


class SdrError(Exception):
    """Base class for all package errors."""


class DomainError(SdrError, ValueError):
    """A precondition on inputs or parameters is violated."""


class NumericalError(SdrError):
    """Base class for failures of the numerics rather than of the inputs."""


class IllConditionedError(NumericalError):
    """A matrix required to be invertible is singular or near-singular."""


class ConvergenceError(NumericalError):
    """An iterative algorithm failed to converge.

    Carries the last iterate and the objective trace so callers can inspect
    or salvage partial results.
    """

    def __init__(self, message, last=None, trace=None):
        super().__init__(message)
        self.last = last
        self.trace = trace


class McDegeneracyError(NumericalError):
    """All Monte-Carlo importance weights underflowed for some cluster."""


class SeparationError(NumericalError):
    """A logistic fit encountered (quasi-)perfect separation."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node
