"""Exception types raised across the pipeline."""


class TcIdmError(Exception):
    """Base class for all pipeline errors."""


# geometry
class DegenerateConfiguration(TcIdmError):
    """Point set cannot determine a rotation (fewer than 3 points or collinear)."""

    def __init__(self, msg, frame=None):
        super().__init__(msg if frame is None else f"frame {frame}: {msg}")
        self.frame = frame


class LengthMismatch(TcIdmError):
    pass


# depth alignment
class InsufficientOverlap(TcIdmError):
    pass


class DegenerateDepth(TcIdmError):
    pass


class NonPositiveScale(TcIdmError):
    pass


class EmptySequence(TcIdmError):
    pass


# tracks
class FrameCountMismatch(TcIdmError):
    pass


class IntrinsicsMissing(TcIdmError):
    pass


class TooFewTracks(TcIdmError):
    pass


class TooFewVisibleFrames(TcIdmError):
    pass


# pose recovery
class InsufficientVisibility(TcIdmError):
    def __init__(self, msg, frame=None):
        super().__init__(msg if frame is None else f"frame {frame}: {msg}")
        self.frame = frame


class WindowTooLarge(TcIdmError):
    pass


# heads
class DimensionMismatch(TcIdmError):
    pass


class EmptyDataset(TcIdmError):
    pass


# oracle
class SpecInvalid(TcIdmError):
    pass


class HorizonMismatch(TcIdmError):
    pass


# cli / pipeline
class UnknownFormat(TcIdmError):
    pass


class ManifestError(TcIdmError):
    pass


class StageError(TcIdmError):
    """Wraps a stage failure with the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
