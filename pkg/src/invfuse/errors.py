"""Exception types shared across the package.

Everything derives from InvfuseError so callers (notably the CLI) can map
failures onto exit codes: usage/input problems vs. numeric breakdowns.
"""


class InvfuseError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(InvfuseError):
    """An operation received tensors whose shapes do not fit its contract."""


class TapeError(InvfuseError):
    """Misuse of the autodiff tape (wrong tape, reused tape, non-scalar root)."""


class NumericError(InvfuseError):
    """A computation produced non-finite values or otherwise broke down."""


class ConfigError(InvfuseError):
    """A config file or config value is invalid.  Carries a line number when
    the problem is tied to a specific line of a key=value file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(InvfuseError):
    """A checkpoint file is truncated, corrupt, or fails its checksum."""


class ImageIOError(InvfuseError):
    """An image file cannot be parsed or violates the format contract."""
