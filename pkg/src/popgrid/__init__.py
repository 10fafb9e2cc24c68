"""popgrid: static and dynamic urban population density estimation from
mobile-network metadata, with a synthetic-city oracle for validation."""

from .errors import (
    DegenerateDataError,
    GeometryError,
    InputError,
    InsufficientDataError,
    PopgridError,
)

__version__ = "0.1.0"

__all__ = [
    "PopgridError",
    "InputError",
    "GeometryError",
    "InsufficientDataError",
    "DegenerateDataError",
    "__version__",
]
