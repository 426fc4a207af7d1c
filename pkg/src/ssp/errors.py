class SspError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(SspError, ValueError):
    """Invalid input: bad shapes, out-of-range values, inconsistent sizes."""


class ParseError(ValidationError):
    """A point cloud or config file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class StateError(SspError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class RefusalError(ValidationError):
    """The request is valid but too large to honour (e.g. brute force on big graphs)."""
