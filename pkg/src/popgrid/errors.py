"""Exception taxonomy shared by all popgrid modules.

The CLI maps these onto process exit codes: bad input -> 1,
not enough data -> 2, numerical degeneracy -> 3.
"""


class PopgridError(Exception):
    """Base class for all popgrid errors."""

    exit_code = 1


class InputError(PopgridError):
    """Malformed or inconsistent input (files, arguments, series shapes)."""

    exit_code = 1


class GeometryError(InputError):
    """Invalid polygon or tessellation geometry; message names the offending id."""

    exit_code = 1


class InsufficientDataError(PopgridError):
    """Too few samples, days or cells to run the requested operation."""

    exit_code = 2


class DegenerateDataError(PopgridError):
    """Rank deficiency, zero variance, or an undefined normalizer."""

    exit_code = 3
