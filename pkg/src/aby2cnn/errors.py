class Aby2Error(Exception):
    """Base class for all errors raised by this package."""


class RangeError(Aby2Error, ValueError):
    pass


class ShapeError(Aby2Error, ValueError):
    pass


class ProtocolError(Aby2Error):
    """Parties disagree on protocol state (dims, op ids, config) or a peer aborted."""


class TransportError(Aby2Error, ConnectionError):
    pass


class FramingError(TransportError):
    pass


class HandshakeError(ProtocolError):
    pass


class ResourceError(Aby2Error):
    """Correlated randomness ran out before the gate finished."""


class ConfigurationError(Aby2Error, ValueError):
    pass


class ParseError(Aby2Error, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
