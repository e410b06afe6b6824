"""Exception hierarchy shared by all clcnet modules."""

from __future__ import annotations


class ClcnetError(Exception):
    """Base class for every error raised by this package."""


class DegenerateInputError(ClcnetError, ValueError):
    pass


class InvalidProbabilityError(ClcnetError, ValueError):
    pass


class NumericOverflowError(ClcnetError, ArithmeticError):
    pass


class EmptyInputError(ClcnetError, ValueError):
    pass


class PairedRecordError(ClcnetError, ValueError):
    pass


class MissingRecordError(ClcnetError, LookupError):
    pass


class FoldSizeError(ClcnetError, ValueError):
    pass


class TrainingDivergedError(ClcnetError, ArithmeticError):
    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}: loss is not finite")


class RecordFormatError(ClcnetError, ValueError):
    """A record file line failed validation. ``line`` is 1-based."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class RecordParseError(RecordFormatError):
    pass


class DuplicateIdError(RecordFormatError):
    pass


class LabelError(RecordFormatError):
    pass


class WeightsVersionError(ClcnetError, ValueError):
    pass


class WeightsCorruptionError(ClcnetError, ValueError):
    pass
