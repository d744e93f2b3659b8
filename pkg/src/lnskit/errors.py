class LnsError(Exception):
    """Base class for errors raised by lnskit."""


class ConfigError(LnsError, ValueError):
    """Invalid format, quantizer, datapath or experiment configuration."""


class DataError(LnsError, ValueError):
    """Invalid numeric input (NaN/Inf, empty tensor, all-zero log error...)."""


class ModelError(LnsError, ValueError):
    """Inconsistent network shapes."""


class UsageError(LnsError, RuntimeError):
    """API called out of order, e.g. backward without a forward cache."""
