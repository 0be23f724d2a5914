"""Exception types shared across the package."""


class CtpError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(CtpError):
    """Invalid or inconsistent configuration."""


class DataError(CtpError):
    """Missing, malformed, or unreadable data artifacts."""


class NumericError(CtpError):
    """Non-finite values encountered where finite math is required."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt or does not match the requesting config."""
