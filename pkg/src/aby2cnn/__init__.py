"""Two-party ABY2.0-style secure CNN inference over Z_2^64."""

from aby2cnn.errors import (
    ConfigurationError,
    FramingError,
    HandshakeError,
    ParseError,
    ProtocolError,
    RangeError,
    ResourceError,
    ShapeError,
    TransportError,
)
from aby2cnn.ring import FixedPointConfig, decode, encode, truncate_part

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "FixedPointConfig",
    "FramingError",
    "HandshakeError",
    "ParseError",
    "ProtocolError",
    "RangeError",
    "ResourceError",
    "ShapeError",
    "TransportError",
    "decode",
    "encode",
    "truncate_part",
]
