"""Shared exception hierarchy.

Module-specific exceptions subclass one of the four categories below so the
CLI can map failures onto stable exit codes (data = 3, provider = 4,
calibration-missing = 5).
"""


class FincadError(Exception):
    """Base class for every error raised by this package."""


class DataError(FincadError):
    """Bad or insufficient input data (CSV files, datasets, windows)."""


class ProviderError(FincadError):
    """A model provider failed or is misconfigured.

    ``retryable`` tells callers whether the same request may be retried.
    """

    def __init__(self, message: str, *, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class CalibrationMissingError(FincadError):
    """A command needs calibration artifacts that have not been produced."""


class UsageError(FincadError):
    """Invalid configuration or arguments."""
