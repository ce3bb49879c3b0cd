"""Leader-follower collaborative semantic segmentation simulator."""

from .errors import (
    BoundsError,
    ConfigError,
    EncodingError,
    FrameError,
    ParameterError,
    ShapeError,
    SkySegError,
    StateError,
)

__version__ = "0.1.0"
