"""Exception hierarchy shared by every subsystem."""


class DistSlamError(Exception):
    """Base class for all errors raised by this package."""


class AngleNearPi(DistSlamError, ValueError):
    """Rotation angle too close to pi for a unique principal logarithm."""


class SingularCovariance(DistSlamError, ValueError):
    pass


class MissingChainSegment(DistSlamError, KeyError):
    pass


class ParseError(DistSlamError, ValueError):
    def __init__(self, message, line_no=None, token=None):
        where = "" if line_no is None else f"line {line_no}: "
        ctx = "" if token is None else f" (near {token!r})"
        super().__init__(f"{where}{message}{ctx}")
        self.line_no = line_no
        self.token = token


class DomainError(DistSlamError, ValueError):
    pass


class DimensionMismatch(DistSlamError, ValueError):
    pass


class DisconnectedGraph(DistSlamError):
    pass


class ConnectivityLost(DistSlamError):
    """A peer left communication range while a protocol session was open."""

    def __init__(self, message, partial_log=None):
        super().__init__(message)
        self.partial_log = list(partial_log or [])


class KeyMismatch(DistSlamError, KeyError):
    pass


class UnknownParameter(DistSlamError, ValueError):
    pass


class ConfigError(DistSlamError, ValueError):
    pass
