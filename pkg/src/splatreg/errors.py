"""Exception hierarchy and the process exit codes each error maps to."""

from __future__ import annotations

from enum import IntEnum


class ExitCode(IntEnum):
    SUCCESS = 0
    BAD_CONFIG = 2
    IO_ERROR = 3
    EMPTY_SUBMAP = 4
    NO_CONSENSUS = 5
    DEGENERATE_GEOMETRY = 6
    INTERNAL = 10


class SplatRegError(Exception):
    """Base class. ``stage`` is filled in by the pipeline when it re-raises."""

    exit_code = ExitCode.INTERNAL
    stage: str | None = None


class ConfigError(SplatRegError):
    exit_code = ExitCode.BAD_CONFIG


class MapFormatError(SplatRegError):
    """A file on disk does not follow its documented layout."""

    exit_code = ExitCode.IO_ERROR


class HeaderError(MapFormatError):
    pass


class PayloadSizeError(MapFormatError):
    """Payload length disagrees with the record count declared in the header."""


class CountMismatchError(MapFormatError):
    def __init__(self, what: str, expected: int, found: int):
        super().__init__(f"{what}: expected {expected} records, found {found}")
        self.expected = expected
        self.found = found


class NonFiniteError(MapFormatError):
    def __init__(self, what: str, index: int):
        super().__init__(f"{what}: non-finite value at record {index}")
        self.index = index


class TextFormatError(MapFormatError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class NoSemanticsError(SplatRegError):
    exit_code = ExitCode.IO_ERROR


class EmptySubmapError(SplatRegError):
    exit_code = ExitCode.EMPTY_SUBMAP


class EmptyCorrespondenceError(SplatRegError):
    exit_code = ExitCode.EMPTY_SUBMAP


class DegenerateGeometryError(SplatRegError):
    exit_code = ExitCode.DEGENERATE_GEOMETRY


class InsufficientCorrespondencesError(SplatRegError):
    exit_code = ExitCode.NO_CONSENSUS


class NoConsensusError(SplatRegError):
    exit_code = ExitCode.NO_CONSENSUS

    def __init__(self, best_count: int, required: int):
        super().__init__(f"best consensus has {best_count} inliers, {required} required")
        self.best_count = best_count
        self.required = required
