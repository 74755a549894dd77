"""Configuration error types for fail-fast validation."""


class ConfigError(ValueError):
    """Raised when the assembled configuration is invalid."""


class SpecError(ConfigError):
    """Raised when a workload spec cannot run on the requested cluster shape."""
