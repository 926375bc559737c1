"""Exception hierarchy shared across the package."""


class CollabSlamError(Exception):
    pass


# geometry
class GeometryError(CollabSlamError):
    pass


class OutOfRange(GeometryError):
    pass


class DegenerateInterval(GeometryError):
    pass


class DegenerateConfiguration(GeometryError):
    pass


class TooFewPoints(GeometryError):
    pass


class Degenerate(GeometryError):
    """Raised by the 2D hull when every input point is collinear."""


# map model
class MapError(CollabSlamError):
    pass


class MapMismatch(MapError):
    pass


class IdCollision(MapError):
    pass


# wire protocol
class ProtocolError(CollabSlamError):
    pass


class Overflow(ProtocolError):
    pass


class DecodeError(ProtocolError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class CountMismatch(DecodeError):
    pass


class UnknownMsgType(DecodeError):
    pass


class WindowOverrun(ProtocolError):
    pass


class UnknownSession(ProtocolError):
    pass


# optimization
class OptimizationError(CollabSlamError):
    pass


class NotConnectedToGauge(OptimizationError):
    pass


class Underconstrained(OptimizationError):
    pass


# client / server
class TrackingLost(CollabSlamError):
    """Not a fault: the client must open a new session."""


class NoBracket(CollabSlamError):
    pass


class TooFewAssociations(CollabSlamError):
    pass


class ConfigError(CollabSlamError):
    pass
