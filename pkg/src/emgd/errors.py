"""Exception types shared across the package."""


class EmgdError(Exception):
    """Base class for all library errors."""


class InvalidInputError(EmgdError):
    """Arguments violate a documented precondition (shape, range, value)."""


class NumericError(EmgdError):
    """A computation produced or received non-finite values.

    Carries an optional ``tick`` attribute when raised mid-run.
    """

    def __init__(self, message: str, tick: int | None = None):
        super().__init__(message)
        self.tick = tick


class DegenerateGradientError(EmgdError):
    """A zero-norm gradient makes cosine similarity undefined."""


class UnsupportedSizeError(EmgdError):
    """Problem size outside the supported range (e.g. grid search with k > 4)."""


class UnknownTaskError(EmgdError):
    """Referenced task has no classifier head."""


class TaskExistsError(EmgdError):
    """Attempt to add a head for a task that already has one."""


class ConfigError(EmgdError):
    """Invalid or infeasible configuration."""


class FormatError(EmgdError):
    """Malformed binary file. ``offset`` locates the first bad byte."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IncompleteMatrixError(EmgdError):
    """Accuracy matrix is missing entries required by the metric formulas."""


class EmptyMemoryError(EmgdError):
    """Sampling requested from an empty rehearsal buffer."""


class StreamEnd(Exception):
    """Control-flow signal: a task's data stream is exhausted."""
