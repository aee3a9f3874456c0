"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class EDLError(Exception):
    exit_code = 1


class ValidationError(EDLError, ValueError):
    """Bad input values: shapes, ranges, malformed files."""

    exit_code = 1


class ConfigurationError(ValidationError):
    """A run cannot proceed with the given data/config combination."""


class NumericFault(EDLError, ArithmeticError):
    """Non-finite values appeared during a computation."""

    exit_code = 3
