"""Exception types shared across the package."""


class LTFEError(Exception):
    """Base class for all package errors."""


class ShapeError(LTFEError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(LTFEError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class NumericalError(LTFEError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(LTFEError, ValueError):
    """A serialized tensor stream is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
