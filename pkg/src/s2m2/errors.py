"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ValidationError(ValueError):
    """An argument value is outside its allowed domain."""


class ConfigurationError(ValueError):
    """A run or dataset configuration cannot be satisfied."""


class UsageError(RuntimeError):
    """An API was called in a state or manner it does not support."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient contained NaN or infinity."""


class FormatError(ValueError):
    """A binary or text container is malformed.

    ``offset`` is the byte (or line) position where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
