"""Exception hierarchy shared by every dynba module."""


class DynbaError(Exception):
    """Base class for all errors raised by dynba."""


class NonPositiveDepth(DynbaError):
    """A point lies behind or on the camera plane, or a depth is <= 0."""


class DegenerateConfiguration(DynbaError):
    """Point sets are collinear/coincident, so an alignment is undefined."""


class FormatError(DynbaError):
    """A file on disk has a bad magic, dtype or shape."""


class InvariantViolation(DynbaError):
    """Loaded data breaks a type invariant (the message locates the offender)."""


class MissingInput(DynbaError):
    """A file required by the enabled stages is absent."""


class NotDensified(DynbaError):
    """Dense point maps were requested before densification ran."""


class InsufficientCorrespondences(DynbaError):
    pass


class DegenerateMotion(DynbaError):
    """Two-view geometry is unconstrained (no parallax, pure rotation, ...)."""


class ShapeMismatch(DynbaError):
    pass


class NumericalFailure(DynbaError):
    """Non-finite residuals or an augmented system that stays singular."""


class SolverFailure(DynbaError):
    """A pipeline stage could not produce a usable solution."""


class InsufficientStaticTracks(SolverFailure):
    pass


class InsufficientAnchors(DynbaError):
    pass


class NoValidPixels(DynbaError):
    pass


class ConfigError(DynbaError):
    pass
