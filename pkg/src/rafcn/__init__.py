"""Spatial and channel relation modules in a small FCN, on a numpy autograd core."""

from .errors import ConfigError, DataError, DimensionError, NumericalError
from .relation import IntegrationMode

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DimensionError", "IntegrationMode", "NumericalError", "__version__"]
