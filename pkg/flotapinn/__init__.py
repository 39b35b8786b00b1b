"""Physics-informed neural soft sensors for rougher flotation cells."""

from .errors import FlotationError

__version__ = "0.1.0"

__all__ = ["FlotationError", "__version__"]
