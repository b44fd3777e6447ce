"""Temporal feature evolution on a toy detector, in plain numpy."""
from .errors import DomainError, FormatError, LTFEError, NumericalError, ShapeError

__version__ = "0.1.0"

__all__ = ["DomainError", "FormatError", "LTFEError", "NumericalError", "ShapeError", "__version__"]
