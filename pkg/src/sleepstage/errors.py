"""Exception hierarchy shared by all pipeline stages.

Every exception derives from :class:`SleepStageError` and carries an
``exit_code`` used by the command line front end.
"""

from __future__ import annotations


class SleepStageError(Exception):
    exit_code = 1


# parse errors (exit 2)
class ParseError(SleepStageError):
    exit_code = 2


class ConfigError(ParseError, ValueError):
    pass


class LabelError(ParseError, ValueError):
    def __init__(self, token: str, line: int | None = None):
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"unknown stage label {token!r}{where}")
        self.token = token
        self.line = line


# data errors (exit 3)
class DataError(SleepStageError, ValueError):
    exit_code = 3


class EdfError(DataError):
    pass


class EdfStructureError(EdfError):
    """File is shorter than its header says, or its layout is inconsistent."""


class EdfHeaderError(EdfError):
    """A header field could not be parsed. ``offset`` is the absolute byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CalibrationError(EdfError):
    pass


class PhysicalRangeError(EdfError):
    def __init__(self, channel: str, index: int, value: float):
        super().__init__(
            f"channel {channel!r}: sample {index} = {value!r} lies outside the "
            "declared physical range"
        )
        self.channel = channel
        self.index = index


class MontageError(DataError):
    pass


class FilterDesignError(DataError):
    pass


class ShapeError(DataError):
    pass


class KappaUndefinedError(DataError):
    pass


# training errors (exit 4)
class TrainingError(SleepStageError):
    exit_code = 4


class ModeError(TrainingError):
    pass


class StateError(TrainingError):
    pass


class SplitError(TrainingError, ValueError):
    pass


# orchestration errors (exit 5)
class OrchestrationError(SleepStageError):
    exit_code = 5


class AggregationError(OrchestrationError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing table cells: " + ", ".join(map(str, self.missing)))
