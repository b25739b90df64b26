"""Exception types shared across the toolkit."""


class LidarMapError(Exception):
    """Base class for all toolkit errors."""


class TooFewPoints(LidarMapError):
    """Plane fitting needs at least three points."""


class DegenerateGeometry(LidarMapError):
    """Input geometry has no unique solution (collinear or rank-deficient)."""


class NoValidSeeds(LidarMapError):
    """Every seed candidate in a bin was rejected as noise."""


class TooFewCorrespondences(LidarMapError):
    """Pairwise measurements need at least two correspondences."""


class AllMeasurementsRejected(LidarMapError):
    """The robust solver drove every measurement weight to zero."""


class EmptyConsensus(LidarMapError):
    """Component-wise translation voting found no quorum."""


class MatchingFailed(LidarMapError):
    """The matcher produced fewer than two putative correspondences."""


class DisconnectedGraph(LidarMapError):
    """Pose graph is not connected."""


class NoAnchor(LidarMapError):
    """Pose graph optimization requires at least one anchored node."""


class LowConfidence(LidarMapError):
    """Map-to-map alignment produced fewer inliers than the quorum."""


class NoInterLoops(LidarMapError):
    """No inter-session loop candidate survived verification."""


class EmptyInput(LidarMapError):
    """Operation requires at least one scan."""


class MalformedFile(LidarMapError):
    """Binary scan file has an invalid size."""


class MalformedLine(LidarMapError):
    """Text record does not match the expected field count."""


class NonRigidRotation(LidarMapError):
    """Parsed rotation deviates too far from orthonormality."""


class ConfigError(LidarMapError):
    """Configuration file contains an unknown key or a bad value."""
