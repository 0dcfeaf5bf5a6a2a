"""Exception types shared across the toolkit."""


class RolewatchError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(RolewatchError, ValueError):
    """A configuration object or file is invalid."""


class UsageError(RolewatchError, ValueError):
    """An operation was called with arguments outside its contract."""


class UndefinedScoreError(RolewatchError, ValueError):
    """A score or similarity is mathematically undefined for the input."""
