class CMDiffError(Exception):
    """Base class for library errors."""


class ConfigError(CMDiffError, ValueError):
    """Invalid configuration value (schedule endpoints, bin counts, ...)."""


class IngestionError(CMDiffError):
    """Missing, unpaired or unreadable input data."""


class NumericError(CMDiffError):
    """Non-finite values during training. ``snapshot`` carries diagnostics."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
