"""Exception hierarchy.

Every pipeline failure derives from :class:`HeadgrowError` so callers (the CLI,
the ablation runner) can catch one type and report ``type(err).__name__``.
"""


class HeadgrowError(Exception):
    """Base class for all reconstruction errors."""


# ingest
class DegenerateFiducials(HeadgrowError):
    pass


class EmptyCluster(HeadgrowError):
    pass


class ManifestParseError(HeadgrowError):
    pass


class MissingImage(HeadgrowError):
    pass


class MissingFrontalCluster(HeadgrowError):
    pass


# synth / rasterization
class EmptyProjection(HeadgrowError):
    pass


class IoError(HeadgrowError):
    pass


# photometric
class TooFewPhotos(HeadgrowError):
    pass


class DegenerateLighting(HeadgrowError):
    pass


# ambiguity
class InsufficientOverlap(HeadgrowError):
    pass


class RankDeficientNormals(HeadgrowError):
    pass


class SingularTransform(HeadgrowError):
    pass


# integrate
class NoValidPixels(HeadgrowError):
    pass


class SolverDivergence(HeadgrowError):
    pass


class EmptyRegion(HeadgrowError):
    pass


# grow
class NeighborNotCompleted(HeadgrowError):
    """Raised when a cluster is grown before its neighbour toward 0 degrees."""


# eval
class NoValidOverlap(HeadgrowError):
    pass


class DegenerateFit(HeadgrowError):
    pass
