"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new exceptions should
subclass one of the three roots below rather than raising bare
ValueError from command code.
"""

from __future__ import annotations


class TitlecatError(Exception):
    """Base class for all package-specific errors."""

    exit_code = 1


class UsageError(TitlecatError):
    """Bad command-line arguments or an unusable flag combination."""

    exit_code = 1


class DataError(TitlecatError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class MalformedPathError(DataError):
    """A category path string that cannot be parsed."""


class DataFormatError(DataError):
    """A dataset file that violates its JSONL contract."""


class LexiconFormatError(DataError):
    """An attribute lexicon file that cannot be parsed."""


class TrainingError(TitlecatError):
    """Training could not produce a usable model."""

    exit_code = 3


class EmptyDataError(TrainingError):
    """A training routine received an empty example set."""


class DegenerateTrainingError(TrainingError):
    """A training routine received too few distinct classes."""
