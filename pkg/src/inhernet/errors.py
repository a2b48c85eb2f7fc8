"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not compose."""


class RangeError(ValueError):
    """A scalar argument (rank, label, index) is outside its valid range."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but degenerate in value (e.g. all-zero matrix)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class StateError(RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class FormatError(ValueError):
    """A file does not match the expected container format."""


class CorruptionError(ValueError):
    """A file matches the format but its contents are internally inconsistent."""


class ParseError(ValueError):
    """Delimited text could not be parsed; message carries the line number."""
