"""Exception hierarchy shared by every rlmtkit module."""

from __future__ import annotations


class RlmtError(Exception):
    """Base class for all rlmtkit errors."""


class InvalidInputError(RlmtError, ValueError):
    """An argument violates an operation's precondition."""


class DataError(RlmtError):
    """A dataset or config file could not be parsed.

    ``path`` and ``line`` locate the offending record when known.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class CheckpointError(DataError):
    """A checkpoint file is malformed or inconsistent."""


class VersionError(CheckpointError):
    """A checkpoint was written by an incompatible format version."""


class NumericError(RlmtError, ArithmeticError):
    """A NaN or Inf appeared in parameters or losses."""


class JudgeError(RlmtError):
    """The trait judge failed or returned an unusable answer."""
