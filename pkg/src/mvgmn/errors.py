"""Exception taxonomy shared across the package.

Validation-style errors (bad shapes, bad config, bad input data) map to CLI
exit code 1; runtime errors (non-finite numerics) map to exit code 2.
"""


class MvgmnError(Exception):
    """Base class for all package errors."""


class DimensionError(MvgmnError):
    """Operand shapes do not compose."""


class ConfigurationError(MvgmnError):
    """A config value is outside its legal set."""


class InputError(MvgmnError):
    """Caller-supplied data violates a precondition."""


class NumericError(MvgmnError):
    """A computation produced NaN/Inf or an otherwise unusable value."""


class FormatError(MvgmnError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
