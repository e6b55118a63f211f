"""Exception types shared across the package.

The command line maps these onto exit codes (usage 1, data 2, numerical 3),
so library code should raise the most specific type that applies rather
than bare ValueError once inputs have left the caller's hands.
"""


class DensindexError(Exception):
    """Base class for package errors."""


class DataError(DensindexError):
    """Malformed, inconsistent, or insufficient input data."""


class NumericalError(DensindexError):
    """A numerical routine failed to converge or produced non-finite values."""
