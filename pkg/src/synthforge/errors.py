"""Exception hierarchy shared across the package."""


class SynthForgeError(Exception):
    """Base class for all synthforge errors."""


class ConfigError(SynthForgeError):
    """Bad configuration file or CLI arguments."""


class DataFormatError(SynthForgeError):
    """Unreadable or malformed volume / pool / manifest file."""


class ContainerResampleError(SynthForgeError):
    """Generated container mask is degenerate; caller should retry."""


class PoolMismatchError(SynthForgeError):
    """Blueprint was sampled against a different shape pool."""


class ValidationFailure(SynthForgeError):
    """A dataset validation check failed."""
