"""Exception hierarchy shared by every skyseg module."""


class SkySegError(Exception):
    """Base class for all skyseg errors."""


class ShapeError(SkySegError, ValueError):
    pass


class ParameterError(SkySegError, ValueError):
    pass


class ConfigError(SkySegError, ValueError):
    pass


class BoundsError(SkySegError, IndexError):
    pass


class StateError(SkySegError, RuntimeError):
    pass


class EncodingError(SkySegError, ValueError):
    pass


class FrameError(SkySegError, ValueError):
    """Malformed, truncated or unrecognised wire frame."""
