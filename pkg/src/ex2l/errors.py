"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class Ex2lError(Exception):
    exit_code = 4


class ConfigError(Ex2lError):
    exit_code = 2

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + "\n" + "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(message)


class DataError(Ex2lError):
    exit_code = 3


class FormatError(DataError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UsageError(Ex2lError, ValueError):
    exit_code = 2
