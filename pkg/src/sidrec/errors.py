"""Shared exception types.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, InvariantError -> 3.  InputError marks an operation
called with arguments that violate its preconditions.
"""


class SidrecError(Exception):
    pass


class InputError(SidrecError, ValueError):
    """An operation rejected its inputs (bad shapes, unknown ids, ...)."""


class ConfigError(SidrecError):
    """Unparseable config text or an unknown/invalid config key."""


class DataError(SidrecError):
    """Malformed data or artifact file.  Message carries the position."""

    def __init__(self, message, path=None, line=None):
        if path is not None and line is not None:
            message = f"{path}:{line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class InvariantError(SidrecError):
    """A runtime invariant that should never fail did fail."""
