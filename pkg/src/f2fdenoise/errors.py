"""Exception hierarchy shared across modules.

The CLI maps :class:`DataError` to exit status 3 and
:class:`NumericalError` to exit status 4.
"""


class DataError(Exception):
    """Input data is missing, malformed or inconsistent."""


class NumericalError(FloatingPointError):
    """A computation produced or was handed non-finite values."""
