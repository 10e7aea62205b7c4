"""Exception hierarchy.

Errors split into two families: usage errors (bad patterns, bad config,
malformed data files) and numerical errors (failed factorizations,
degenerate samplers).  The CLI maps the former to exit code 1 and the
latter to exit code 2.
"""


class ZeromixError(Exception):
    """Base class for all package errors."""


class UsageError(ZeromixError):
    """Invalid input from the user: config, pattern, or data files."""


class NumericalError(ZeromixError):
    """A numerical procedure failed on otherwise valid input."""


class PatternError(UsageError):
    """A zero pattern violates its invariants."""


class DiagonalZeroError(PatternError):
    """A pattern pair constrains a diagonal entry."""


class IndexOutOfRangeError(PatternError):
    """A pattern index falls outside [1, q]."""


class DuplicatePairError(PatternError):
    """The same (unordered) pair appears more than once."""


class PatternViolationError(UsageError):
    """A matrix tagged with a pattern has nonzero constrained entries."""


class NotPositiveDefiniteError(NumericalError):
    """A symmetric factorization found a nonpositive pivot."""


class SingularNormalEquationsError(NumericalError):
    """The free-coordinate Gram matrix of a column update is singular."""


class DomainError(NumericalError):
    """A model was evaluated outside its domain."""


class DegenerateDrawError(NumericalError):
    """Repeated simulation draws fell outside the model domain."""


class DegenerateWeightError(NumericalError):
    """All importance weights for an individual underflowed."""


class ScheduleError(UsageError):
    """Damping schedule parameters outside their valid range."""


class ValueOutOfRangeError(UsageError):
    """A probability-like input falls outside [0, 1]."""


class DataFormatError(UsageError):
    """A dataset file is malformed; the message carries the row number."""


class ConfigError(UsageError):
    """A run configuration file is missing keys or holds invalid values."""
