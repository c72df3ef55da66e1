"""Exception hierarchy.

DataError covers malformed or inconsistent inputs (CLI exit code 2);
NumericError covers numeric procedures failing on well-formed data
(exit code 3).  Concrete exceptions live next to the code that raises
them and subclass one of these.
"""


class FusionError(Exception):
    """Base class for all errors raised by this package."""


class DataError(FusionError):
    """Malformed or inconsistent input data."""


class NumericError(FusionError):
    """A numeric procedure failed on otherwise well-formed data."""
