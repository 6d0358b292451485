"""Exception types shared across the package."""


class UdalmError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(UdalmError):
    """Invalid configuration value or malformed config file."""


class DataError(UdalmError):
    """Manifest or image loading problem; message names the offending record."""


class InputError(UdalmError):
    """Runtime input violates a model contract (e.g. wrong image size)."""


class CheckpointError(UdalmError):
    """Missing, corrupt, or incompatible checkpoint file."""
