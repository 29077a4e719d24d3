"""Exception hierarchy shared by all modules."""


class PurifyError(Exception):
    """Base class for all library errors."""


class ParameterError(PurifyError, ValueError):
    """An argument or configuration value violates a precondition."""


class DataError(PurifyError, ValueError):
    """Input data content is invalid (non-finite values, bad labels, ...)."""


class UsageError(PurifyError, RuntimeError):
    """An API was called out of order (e.g. backprop with a stale cache)."""


class IntegrityError(PurifyError, RuntimeError):
    """A file failed a structural or checksum check."""
