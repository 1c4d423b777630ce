"""Exception types shared across the library."""


class SplatPoseError(Exception):
    """Base class for all library-specific errors."""


class AngleNearPi(SplatPoseError):
    """Rotation log requested too close to the pi-angle branch cut."""


class ParseError(SplatPoseError):
    """Malformed PLY header or payload."""


class MissingProperty(ParseError):
    """A required PLY property is absent; the message names it."""


class EmptyCloud(SplatPoseError):
    """A Gaussian cloud with zero primitives where at least one is required."""


class ShapeMismatch(SplatPoseError):
    """Array arguments disagree in shape."""


class EmptyMask(SplatPoseError):
    """A pixel mask selects no valid pixels."""


class NoValidDepth(SplatPoseError):
    """No pixel carries valid depth in both the observation and the render."""


class TapeMismatch(SplatPoseError):
    """A backward pass was handed gradients that do not match its tape."""
