"""Exception types shared across the package.

The CLI maps :class:`FormatError` to exit code 3 (I/O and file content) and
every other :class:`RubikError` to exit code 4 (domain errors).
"""


class RubikError(Exception):
    """Base class for domain errors raised by this package."""


class FormatError(RubikError):
    """A file could not be read or written, or its content is malformed."""


class ShapeError(RubikError, ValueError):
    """Array shapes do not agree."""

    def __init__(self, message: str = "shape error"):
        super().__init__(message)
