"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError -> 3, NumericError -> 4.
"""


class DataError(Exception):
    """Missing, malformed, or inconsistent input data."""


class NumericError(Exception):
    """Non-finite values or diverging computations."""


class DegenerateCorrelationError(ValueError):
    """Correlation requested against a zero-variance series."""
