"""Exception hierarchy."""


class SapalmError(Exception):
    """Base class for all library errors."""


class StructureError(SapalmError, ValueError):
    """Block structure mismatch: wrong block count, block size, or index."""


class ParameterError(SapalmError, ValueError):
    """Invalid numeric parameter (nonpositive stepsize, bad threshold, ...)."""


class DivergenceError(SapalmError, FloatingPointError):
    """An engine step produced a non-finite value."""

    def __init__(self, message, k=None, block=None):
        super().__init__(message)
        self.k = k
        self.block = block


class ConfigError(SapalmError, ValueError):
    """Invalid experiment configuration. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
