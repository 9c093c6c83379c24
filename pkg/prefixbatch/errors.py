class PrefixBatchError(Exception):
    """Base class for every error caused by bad input rather than a bug."""

    pass


class ValidationError(PrefixBatchError):
    """Raised when a value, file or combination of inputs is invalid."""

    pass


class ConfigurationError(ValidationError):
    """Raised when a configuration object is constructed with out-of-range values."""

    pass
