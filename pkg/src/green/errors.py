"""Exception hierarchy shared by every layer of the package."""


class GreenError(Exception):
    """Base class for all errors raised by :mod:`green`."""


class ShapeError(GreenError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(GreenError):
    """A precondition of an operation was violated."""


class StateError(GreenError):
    """An object is in the wrong state for the requested operation."""


class ParameterError(GreenError, ValueError):
    """A configuration or hyper-parameter value is out of range."""


class NumericalError(GreenError, ArithmeticError):
    """A computation produced (or would produce) a non-finite value."""


class FormatError(GreenError):
    """A file does not follow the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A file declares a format version this build cannot read."""


class ParseError(FormatError):
    """A text record could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RangeError(ParseError):
    """A stored class label lies outside the declared class count."""
