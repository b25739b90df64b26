"""Learning-free, outlier-robust LiDAR mapping toolkit."""

__version__ = "0.1.0"

from .geometry import (
    PlaneModel,
    PointCloud,
    PointLabel,
    RigidPose,
    fit_plane_pca,
    pose_apply,
    pose_compose,
    pose_exp,
    pose_inverse,
    pose_log,
    rotation_geodesic_error,
    voxel_downsample,
)

__all__ = [
    "PlaneModel",
    "PointCloud",
    "PointLabel",
    "RigidPose",
    "fit_plane_pca",
    "pose_apply",
    "pose_compose",
    "pose_exp",
    "pose_inverse",
    "pose_log",
    "rotation_geodesic_error",
    "voxel_downsample",
]
