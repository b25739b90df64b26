"""Synthetic labeled LiDAR worlds: scenes, ray-cast scans, and noise injection.

Scenes are built from finite ground planes and oriented boxes (static or
moving along a trajectory). Scans are produced by exact ray casting with a
rotating multi-channel beam model, so every point carries a ground-truth
label and, with zero range noise, lies exactly on the entity it hit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedLine
from .geometry import PointCloud, PointLabel, RigidPose


@dataclass(frozen=True)
class GroundPlane:
    """Plane normal . p + offset = 0, valid over an axis-aligned xy extent."""

    normal: np.ndarray
    offset: float
    extent: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        n = n / np.linalg.norm(n)
        if n[2] < 0:
            n = -n
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True)
class Box:
    """Oriented box: axis-aligned in its own frame, yawed about +z."""

    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))


class LineTrajectory:
    """Constant-velocity straight line; yaw faces the travel direction."""

    def __init__(self, start, velocity, z=None, yaw=None):
        self.start = np.asarray(start, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(velocity, dtype=np.float64).reshape(3)
        if z is not None:
            self.start = self.start.copy()
            self.start[2] = z
        if yaw is None:
            yaw = math.atan2(self.velocity[1], self.velocity[0]) if np.any(self.velocity[:2]) else 0.0
        self.yaw = yaw

    def pose_at(self, t: float) -> RigidPose:
        return RigidPose.from_yaw(self.yaw, self.start + self.velocity * t)


class CircleTrajectory:
    """Circular path at fixed height; yaw tangent to the circle."""

    def __init__(self, center_xy, radius, z, rate, start_angle=0.0):
        self.center = np.asarray(center_xy, dtype=np.float64).reshape(2)
        self.radius = float(radius)
        self.z = float(z)
        self.rate = float(rate)  # radians per time unit
        self.start_angle = float(start_angle)

    def pose_at(self, t: float) -> RigidPose:
        a = self.start_angle + self.rate * t
        pos = np.array(
            [self.center[0] + self.radius * math.cos(a),
             self.center[1] + self.radius * math.sin(a),
             self.z]
        )
        return RigidPose.from_yaw(a + math.pi / 2, pos)


class SquareTrajectory:
    """Counterclockwise walk around a square perimeter at constant speed."""

    def __init__(self, center_xy, half, z, speed):
        self.center = np.asarray(center_xy, dtype=np.float64).reshape(2)
        self.half = float(half)
        self.z = float(z)
        self.speed = float(speed)  # meters per time unit

    def pose_at(self, t: float) -> RigidPose:
        side = 2.0 * self.half
        perimeter = 4.0 * side
        s = (self.speed * t) % perimeter
        edge = int(s // side)
        u = s - edge * side
        h = self.half
        cx, cy = self.center
        if edge == 0:
            pos, yaw = (cx - h + u, cy - h), 0.0
        elif edge == 1:
            pos, yaw = (cx + h, cy - h + u), math.pi / 2
        elif edge == 2:
            pos, yaw = (cx + h - u, cy + h), math.pi
        else:
            pos, yaw = (cx - h, cy + h - u), -math.pi / 2
        return RigidPose.from_yaw(yaw, np.array([pos[0], pos[1], self.z]))


@dataclass
class DynamicObject:
    """A box that moves: size/yaw are local, pose comes from the trajectory."""

    size: np.ndarray
    trajectory: object  # anything with pose_at(t) -> RigidPose
    yaw: float = 0.0

    def box_at(self, t: float) -> Box:
        pose = self.trajectory.pose_at(t)
        yaw = math.atan2(pose.rotation[1, 0], pose.rotation[0, 0]) + self.yaw
        return Box(pose.translation, self.size, yaw)


@dataclass
class SceneSpec:
    """World description: ground planes, static boxes, moving boxes, bounds."""

    ground: list[GroundPlane] = field(default_factory=list)
    static_objects: list[Box] = field(default_factory=list)
    dynamic_objects: list[DynamicObject] = field(default_factory=list)
    bounds: tuple[float, float, float, float] = (-80.0, 80.0, -80.0, 80.0)


@dataclass(frozen=True)
class BeamConfig:
    """Rotating multi-channel beam model (defaults mimic a 64-channel unit)."""

    channels: int = 64
    elevation_deg: tuple[float, float] = (-24.8, 2.0)
    azimuth_steps: int = 1024
    max_range: float = 80.0
    range_noise_sigma: float = 0.01

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.elevation_deg[0] >= self.elevation_deg[1]:
            raise ValueError("elevation range must be (min, max) with min < max")


def _ray_directions(beams: BeamConfig) -> np.ndarray:
    el = np.radians(
        np.linspace(beams.elevation_deg[0], beams.elevation_deg[1], beams.channels)
    )
    az = np.linspace(0.0, 2.0 * math.pi, beams.azimuth_steps, endpoint=False)
    elg, azg = np.meshgrid(el, az, indexing="ij")
    cos_el = np.cos(elg)
    dirs = np.stack(
        [cos_el * np.cos(azg), cos_el * np.sin(azg), np.sin(elg)], axis=-1
    )
    return dirs.reshape(-1, 3)


_MIN_HIT_RANGE = 1e-6


def _intersect_plane(origin, dirs, plane: GroundPlane, max_range):
    denom = dirs @ plane.normal
    num = -(origin @ plane.normal + plane.offset)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = num / denom
    s = np.where(np.abs(denom) > 1e-12, s, np.inf)
    valid = (s > _MIN_HIT_RANGE) & (s <= max_range)
    out = np.full(len(dirs), np.inf)
    hit = origin[None, :] + s[valid, None] * dirs[valid]
    xmin, xmax, ymin, ymax = plane.extent
    inside = (
        (hit[:, 0] >= xmin) & (hit[:, 0] <= xmax)
        & (hit[:, 1] >= ymin) & (hit[:, 1] <= ymax)
    )
    out[valid] = np.where(inside, s[valid], np.inf)
    return out


def _intersect_box(origin, dirs, box: Box, max_range):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o_local = (origin - box.center) @ rot
    d_local = dirs @ rot
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
    t1 = (-half - o_local) * inv
    t2 = (half - o_local) * inv
    # rays parallel to a slab axis: inside the slab -> unconstrained, else miss
    parallel = np.abs(d_local) < 1e-12
    lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
    hi = np.where(parallel, np.inf, np.maximum(t1, t2))
    outside_parallel = parallel & (np.abs(o_local) > half)
    lo = np.where(outside_parallel, np.inf, lo)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    valid = (tmax >= tmin) & (tmin > _MIN_HIT_RANGE) & (tmin <= max_range)
    return np.where(valid, tmin, np.inf)


def simulate_scan(
    scene: SceneSpec,
    sensor: RigidPose,
    t: float,
    beams: BeamConfig,
    seed=0,
) -> PointCloud:
    """Ray-cast one labeled scan from the sensor pose at time t.

    The returned cloud is in the sensor frame. Rays that miss everything
    within max_range produce no point. Deterministic given the seed.
    """
    dirs_local = _ray_directions(beams)
    dirs_world = dirs_local @ sensor.rotation.T
    origin = sensor.translation

    n_rays = len(dirs_local)
    best = np.full(n_rays, np.inf)
    label = np.zeros(n_rays, dtype=np.uint8)

    for plane in scene.ground:
        s = _intersect_plane(origin, dirs_world, plane, beams.max_range)
        closer = s < best
        best = np.where(closer, s, best)
        label = np.where(closer, np.uint8(PointLabel.GROUND), label)
    for box in scene.static_objects:
        s = _intersect_box(origin, dirs_world, box, beams.max_range)
        closer = s < best
        best = np.where(closer, s, best)
        label = np.where(closer, np.uint8(PointLabel.STATIC_OBJECT), label)
    for obj in scene.dynamic_objects:
        s = _intersect_box(origin, dirs_world, obj.box_at(t), beams.max_range)
        closer = s < best
        best = np.where(closer, s, best)
        label = np.where(closer, np.uint8(PointLabel.DYNAMIC_OBJECT), label)

    hit = np.isfinite(best)
    dist = best[hit]
    if beams.range_noise_sigma > 0:
        rng = np.random.default_rng(seed)
        dist = dist + rng.normal(scale=beams.range_noise_sigma, size=len(dist))
    xyz = dist[:, None] * dirs_local[hit]
    intensity = np.full(len(xyz), 0.5)
    return PointCloud(xyz, intensity, label[hit])


def inject_reflected_noise(
    cloud: PointCloud, rate: float, depth_range: tuple[float, float], seed=0
) -> PointCloud:
    """Append mirrored under-ground returns for a fraction of ground points.

    Each selected ground point gets a copy displaced straight down by a
    uniform draw from depth_range, labeled REFLECTED_NOISE. The original
    points are untouched. A cloud without ground labels is returned as is.
    """
    if cloud.labels is None or rate <= 0:
        return cloud
    ground_idx = np.flatnonzero(cloud.labels == PointLabel.GROUND)
    count = int(round(rate * len(ground_idx)))
    if count == 0:
        return cloud
    rng = np.random.default_rng(seed)
    pick = rng.choice(ground_idx, size=count, replace=False)
    pick.sort()
    depth = rng.uniform(depth_range[0], depth_range[1], size=count)
    mirrored = cloud.xyz[pick].copy()
    mirrored[:, 2] -= depth
    xyz = np.vstack([cloud.xyz, mirrored])
    intensity = None
    if cloud.intensity is not None:
        intensity = np.concatenate([cloud.intensity, cloud.intensity[pick]])
    labels = np.concatenate(
        [cloud.labels, np.full(count, PointLabel.REFLECTED_NOISE, dtype=np.uint8)]
    )
    return PointCloud(xyz, intensity, labels, cloud.frame_id)


def make_sequence(
    scene: SceneSpec,
    trajectory,
    beams: BeamConfig,
    n_scans: int,
    seed=0,
) -> tuple[list[PointCloud], list[RigidPose]]:
    """Simulate n scans along a trajectory with per-scan random streams.

    Returns sensor-frame scans and exact ground-truth poses. Streams are
    split per scan index, so regenerating any prefix reproduces it.
    """
    children = np.random.SeedSequence(seed).spawn(n_scans)
    scans, poses = [], []
    for k in range(n_scans):
        pose = trajectory.pose_at(float(k))
        scans.append(simulate_scan(scene, pose, float(k), beams, seed=children[k]))
        poses.append(pose)
    return scans, poses


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------


@dataclass
class SceneConfig:
    """A scene plus the acquisition settings stored alongside it."""

    scene: SceneSpec
    trajectory: object
    beams: BeamConfig
    n_scans: int = 1


def _floats(parts, n, key):
    if len(parts) != n:
        raise MalformedLine(f"'{key}' expects {n} numbers, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise MalformedLine(f"bad number in '{key}' line: {exc}") from exc


def parse_scene(text: str) -> SceneConfig:
    """Parse the plain-text scene schema (see README for the key reference)."""
    bounds = (-80.0, 80.0, -80.0, 80.0)
    ground: list[GroundPlane] = []
    boxes: list[Box] = []
    dynamics: list[DynamicObject] = []
    trajectory = None
    beams = BeamConfig()
    n_scans = 1

    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedLine(f"expected 'key = values': {raw!r}")
        key, _, rest = line.partition("=")
        key = key.strip()
        parts = rest.split()
        if key == "bounds":
            bounds = tuple(_floats(parts, 4, key))
        elif key == "ground":
            v = _floats(parts, 8, key)
            ground.append(GroundPlane(np.array(v[0:3]), v[3], tuple(v[4:8])))
        elif key == "box":
            v = _floats(parts, 7, key)
            boxes.append(Box(np.array(v[0:3]), np.array(v[3:6]), v[6]))
        elif key == "dynamic":
            v = _floats(parts, 10, key)
            traj = LineTrajectory(np.array(v[4:7]), np.array(v[7:10]))
            dynamics.append(DynamicObject(np.array(v[0:3]), traj, yaw=v[3]))
        elif key == "trajectory":
            kind, *rest_parts = parts
            if kind == "line":
                v = _floats(rest_parts, 5, key)
                heading = v[3]
                vel = np.array([v[4] * math.cos(heading), v[4] * math.sin(heading), 0.0])
                trajectory = LineTrajectory(np.array([v[0], v[1], v[2]]), vel, yaw=heading)
            elif kind == "circle":
                v = _floats(rest_parts, 5, key)
                trajectory = CircleTrajectory(v[0:2], v[2], v[3], v[4])
            elif kind == "square":
                v = _floats(rest_parts, 5, key)
                trajectory = SquareTrajectory(v[0:2], v[2], v[3], v[4])
            else:
                raise MalformedLine(f"unknown trajectory kind {kind!r}")
        elif key == "beams":
            v = _floats(parts, 6, key)
            beams = BeamConfig(int(v[0]), (v[1], v[2]), int(v[3]), v[4], v[5])
        elif key == "scans":
            v = _floats(parts, 1, key)
            n_scans = int(v[0])
        else:
            raise MalformedLine(f"unknown scene key {key!r}")

    if not ground:
        ground = [GroundPlane(np.array([0.0, 0.0, 1.0]), 0.0, bounds)]
    if trajectory is None:
        trajectory = LineTrajectory(np.array([0.0, 0.0, 1.7]), np.zeros(3))
    scene = SceneSpec(ground, boxes, dynamics, bounds)
    return SceneConfig(scene, trajectory, beams, n_scans)


def load_scene(path) -> SceneConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene(fh.read())
