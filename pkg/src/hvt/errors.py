"""Configuration errors shared by the config and pooling modules."""


class ConfigError(ValueError):
    """Inconsistent or malformed configuration."""


class PoolingError(ConfigError):
    """The pooling window does not fit the sequence."""
