"""Exception hierarchy shared by all pillarseq modules."""


class PillarSeqError(Exception):
    """Base class for all package errors."""


class IoFailure(PillarSeqError, OSError):
    pass


class FormatError(PillarSeqError, ValueError):
    pass


class ConfigError(PillarSeqError, ValueError):
    pass


class InsufficientFrames(PillarSeqError, ValueError):
    pass


class ShapeMismatch(PillarSeqError, ValueError):
    pass


class NonFiniteValue(PillarSeqError, FloatingPointError):
    pass


class FlagCollision(PillarSeqError, ValueError):
    pass


class MissingCheckpoint(PillarSeqError, FileNotFoundError):
    pass
