"""Shared exception types."""


class DataError(ValueError):
    """Malformed or inconsistent input data (tables, configs, schemas)."""


class NumericalError(RuntimeError):
    """Numerical failure: non-finite values, non-convergence, separation."""
