"""Exception hierarchy shared by every layer of the engine."""

from __future__ import annotations


class ArrayDBError(Exception):
    """Base class for all engine errors."""


class SchemaParseError(ArrayDBError, ValueError):
    """Malformed schema text. ``offset`` is the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ValidationError(ArrayDBError, ValueError):
    pass


class OutOfBoundsError(ArrayDBError, IndexError):
    pass


class ConflictError(ArrayDBError):
    pass


class NotFoundError(ArrayDBError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class VersionError(ArrayDBError):
    pass


class CorruptionError(ArrayDBError):
    pass


class StorageWriteError(ArrayDBError, OSError):
    pass


class MeasurementError(ArrayDBError, ValueError):
    pass


class IngestAborted(ArrayDBError):
    """A client failed; the merge was not attempted."""

    def __init__(self, message: str, failed: dict[int, BaseException]):
        super().__init__(message)
        self.failed = failed


class CSVFormatError(ArrayDBError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line
