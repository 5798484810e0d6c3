"""Exception types raised across the package."""


class VAFLError(Exception):
    """Base class for every error raised by :mod:`vafl`."""


class ConfigurationError(VAFLError, ValueError):
    pass


class ModelError(VAFLError, ValueError):
    pass


class DataError(VAFLError, ValueError):
    pass


class ProtocolError(VAFLError, RuntimeError):
    pass


class AnalysisError(VAFLError, ValueError):
    pass
