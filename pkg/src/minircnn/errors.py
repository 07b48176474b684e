"""Exception hierarchy shared by all minircnn modules."""


class MiniRcnnError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MiniRcnnError, ValueError):
    """Tensor or box shapes do not conform to an operation's contract."""


class ConfigError(MiniRcnnError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(MiniRcnnError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DataError(MiniRcnnError, ValueError):
    """Base class for problems with external data (files, annotations)."""


class FormatError(DataError):
    """A file is malformed. Carries the byte offset or line of the defect."""

    def __init__(self, message, *, offset=None, line=None):
        loc = ""
        if offset is not None:
            loc = f" (byte offset {offset})"
        elif line is not None:
            loc = f" (line {line})"
        super().__init__(message + loc)
        self.offset = offset
        self.line = line


class ValidationError(DataError):
    """Parsed data violates a domain invariant (e.g. an inverted box)."""


class NumericError(MiniRcnnError, ArithmeticError):
    """A computation produced a non-finite value on finite inputs."""
