"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its documented range or shape."""


class ConfigError(ValueError):
    """A run configuration is inconsistent or names unknown keys."""


class DataError(RuntimeError):
    """A dataset/manifest is unusable (missing labels, unreadable files)."""


class ProtocolError(RuntimeError):
    """An evaluation protocol cannot be carried out (degenerate splits)."""


class CorrelationError(ValueError):
    """A correlation coefficient is undefined (zero variance input)."""
