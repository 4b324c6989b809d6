"""Exception hierarchy shared across the package."""


class PlcaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PlcaError, ValueError):
    """Tensor/filter/box dimensions are inconsistent for the requested operation."""


class DivergenceError(PlcaError):
    """An iterative solver produced non-finite or unbounded state.

    `where` names the failing step or epoch index.
    """

    def __init__(self, message: str, where: int | None = None):
        super().__init__(message)
        self.where = where


class ParseError(PlcaError):
    """A file could not be parsed.

    Carries the path and a location: a byte `offset` for binary formats or a
    `line` number (1-based) for text formats.
    """

    def __init__(self, message: str, path: str = "", offset: int | None = None,
                 line: int | None = None):
        loc = ""
        if offset is not None:
            loc = f" at byte {offset}"
        elif line is not None:
            loc = f" at line {line}"
        super().__init__(f"{path}{loc}: {message}" if path or loc else message)
        self.path = path
        self.offset = offset
        self.line = line


class ConfigError(PlcaError, ValueError):
    """Invalid configuration value or unknown configuration key."""
