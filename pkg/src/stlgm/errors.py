"""Exception types shared across the package.

The CLI maps these onto exit codes: validation failures exit 2, numerical
failures exit 3, and I/O problems (plain OSError) exit 4.
"""


class ValidationError(ValueError):
    """Invalid data, configuration, or argument values."""


class SchemaError(ValidationError):
    """Missing, unknown, or ambiguous fields in structured input."""


class NumericalError(RuntimeError):
    """A factorization or other numerical operation failed."""
