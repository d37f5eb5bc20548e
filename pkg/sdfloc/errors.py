"""
Error types raised by the localization toolkit.

Every module raises a subclass of SdfLocError so callers (the pipeline and the CLI)
can tell domain failures apart from programming errors.
"""


class SdfLocError(Exception):
    """Base class for all toolkit errors."""


class AngleAtPi(SdfLocError):
    """Rotation angle is (numerically) pi; the logarithm is not unique there."""


class BehindCamera(SdfLocError):
    """Point is at or behind the image plane and cannot be projected."""


class EmptyScene(SdfLocError):
    """An analytic scene with no primitives was supplied."""


class Unobserved(SdfLocError):
    """SDF query touches a voxel that was never observed."""


class DegenerateProblem(SdfLocError):
    """Not enough constraints to solve for the requested variables."""


class NotConverged(SdfLocError):
    """Solver hit its iteration budget without meeting the tolerances."""


class SingularSystem(SdfLocError):
    """Damped normal equations stayed singular after damping escalation."""


class GaugeUnfixed(SdfLocError):
    """Joint problem has neither a fixed keyframe nor SDF factors anchoring it."""


class TriangulationDegenerate(SdfLocError):
    """Too few views or too little parallax to triangulate a landmark."""


class NoVisibleFeatures(SdfLocError):
    """A keyframe sees fewer anchors than the tracker needs."""


class AssociationFailure(SdfLocError):
    """Fewer than two timestamps could be matched between trajectories."""


class ConfigError(SdfLocError):
    """Configuration file is missing, malformed or references missing paths."""


class MapFormatError(SdfLocError):
    """Map file does not follow the binary map format."""
