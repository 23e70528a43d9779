"""
Exception hierarchy for the risk-aware driving toolkit.

Every error raised deliberately by this package derives from RiskDriveError.
Errors that describe bad input values also derive from ValueError so callers
that only know the standard library can still catch them.
"""

from typing import Optional


class RiskDriveError(Exception):
    """Base class for all package errors."""


class SingularPosition(RiskDriveError, ValueError):
    """Raised when two vehicles share a position and the field is undefined."""


class InvalidGrid(RiskDriveError, ValueError):
    """Raised for a field grid with a non-positive step or empty range."""


class NonPositiveGap(RiskDriveError, ValueError):
    """Raised when a follower's bumper gap to its leader is <= 0."""


class MissingEgo(RiskDriveError, LookupError):
    """Raised when the ego vehicle is not present in the world."""


class NoFeasibleInsertion(RiskDriveError):
    """Raised when the ego cannot be inserted after the configured retries."""


class EpisodeFinished(RiskDriveError):
    """Raised when an environment is stepped after its episode ended."""


class ShapeMismatch(RiskDriveError, ValueError):
    """Raised when tensor or parameter shapes are inconsistent."""


class GraphNotEvaluated(RiskDriveError):
    """Raised when backward is requested without a recorded forward graph."""


class LengthMismatch(RiskDriveError, ValueError):
    """Raised when per-step arrays do not share a common length."""


class NonFiniteLoss(RiskDriveError, ArithmeticError):
    """Raised when the training loss becomes NaN or infinite."""

    def __init__(self, message: str, dump_path: Optional[str] = None) -> None:
        super().__init__(message)
        self.dump_path = dump_path


class NegativeGap(RiskDriveError, ValueError):
    """Raised when a leader/follower pair already overlaps."""


class IncompleteLog(RiskDriveError, ValueError):
    """Raised when an episode log lacks the data needed for a report."""


class ParseError(RiskDriveError, ValueError):
    """Raised for a malformed trajectory CSV row.

    Attributes:
        line: 1-based line number in the source file.
        column: Name of the offending column.
    """

    def __init__(self, message: str, line: int, column: str) -> None:
        super().__init__(f"line {line}, column '{column}': {message}")
        self.line = line
        self.column = column


class MissingColumn(RiskDriveError, ValueError):
    """Raised when a required trajectory CSV column is absent."""


class SubjectNotFound(RiskDriveError, LookupError):
    """Raised when a replay subject id does not occur in the records."""


class ConfigError(RiskDriveError, ValueError):
    """Raised for invalid or unknown configuration keys.

    Attributes:
        key_path: Dotted path of the offending key, e.g. ``trainer.gamma``.
    """

    def __init__(self, message: str, key_path: str = "") -> None:
        prefix = f"{key_path}: " if key_path else ""
        super().__init__(f"{prefix}{message}")
        self.key_path = key_path


class UsageError(RiskDriveError):
    """Raised for command-line misuse."""
