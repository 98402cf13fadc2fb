"""Shared exception bases, mapped to CLI exit codes in one place."""


class DataError(Exception):
    """Invalid, missing, or inconsistent input data (CLI exit code 2)."""


class NumericError(Exception):
    """Numeric state that cannot be recovered from, e.g. a non-finite loss
    (CLI exit code 3)."""
