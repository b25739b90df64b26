"""Core geometry: labeled point clouds, SE(3) poses, and plane fitting.

Every other module builds on the types here. Point clouds are stored as
numpy arrays (index-addressable, order-stable); poses are rotation-matrix
plus translation pairs validated at construction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, TooFewPoints

ROTATION_TOL = 1e-9


class PointLabel(enum.IntEnum):
    """Per-point provenance label (synthetic-data plumbing).

    Values match the on-disk labels sidecar encoding.
    """

    UNLABELED = 0
    GROUND = 1
    STATIC_OBJECT = 2
    DYNAMIC_OBJECT = 3
    REFLECTED_NOISE = 4


@dataclass
class PointCloud:
    """Ordered collection of 3-D points with optional intensity and labels.

    ``xyz`` is an (n, 3) float64 array; ``intensity`` is (n,) in [0, 1] or
    None; ``labels`` is (n,) uint8 of :class:`PointLabel` values or None.
    Coordinates must be finite.
    """

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    labels: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self) -> None:
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got {self.xyz.shape}")
        if not np.isfinite(self.xyz).all():
            raise ValueError("point coordinates must be finite")
        n = len(self.xyz)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64)
            if self.intensity.shape != (n,):
                raise ValueError("intensity must be (n,)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (n,):
                raise ValueError("labels must be (n,)")

    def __len__(self) -> int:
        return len(self.xyz)

    def select(self, indices: np.ndarray) -> "PointCloud":
        """New cloud containing the given row indices (order preserved)."""
        idx = np.asarray(indices)
        return PointCloud(
            self.xyz[idx],
            None if self.intensity is None else self.intensity[idx],
            None if self.labels is None else self.labels[idx],
            self.frame_id,
        )

    @staticmethod
    def empty(frame_id: str = "") -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), frame_id=frame_id)


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if np.abs(r.T @ r - np.eye(3)).max() > ROTATION_TOL:
        raise ValueError("rotation is not orthonormal within 1e-9")
    if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL:
        raise ValueError("rotation determinant is not +1 within 1e-9")
    return r


@dataclass(frozen=True)
class RigidPose:
    """SE(3) transform: p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.isfinite(t).all():
            raise ValueError("translation must be finite")
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidPose(r, np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class PlaneModel:
    """Plane n . p + offset = 0 with unit normal in the +z hemisphere.

    ``flatness`` is the smallest covariance eigenvalue divided by the
    eigenvalue sum of the points the plane was fitted to (0 for exact fits).
    """

    normal: np.ndarray
    offset: float
    flatness: float = 0.0

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length within 1e-9")
        object.__setattr__(self, "normal", n)

    @property
    def uprightness(self) -> float:
        """Cosine between the normal and +z; >= 0 by sign convention."""
        return float(self.normal[2])

    def height_at(self, x, y):
        """Plane z at horizontal location(s); requires a non-horizontal-normal plane."""
        nx, ny, nz = self.normal
        return -(self.offset + nx * x + ny * y) / nz

    def signed_distance(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.normal + self.offset


# ---------------------------------------------------------------------------
# closed-form symmetric 3x3 eigen-decomposition
# ---------------------------------------------------------------------------

_REPEATED_EIG_TOL = 1e-12


def _cross3(a, b):
    return (
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    )


def _dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def _normalize3(v):
    n = math.sqrt(_dot3(v, v))
    return (v[0] / n, v[1] / n, v[2] / n)


def _fix_sign3(v):
    ax, ay, az = abs(v[0]), abs(v[1]), abs(v[2])
    k = 0 if ax >= ay and ax >= az else (1 if ay >= az else 2)
    if v[k] < 0:
        return (-v[0], -v[1], -v[2])
    return v


def _orthonormal_complement3(w):
    # deterministic basis of the plane orthogonal to unit vector w
    if abs(w[0]) > abs(w[1]):
        n = math.hypot(w[0], w[2])
        u = (-w[2] / n, 0.0, w[0] / n)
    else:
        n = math.hypot(w[1], w[2])
        u = (0.0, w[2] / n, -w[1] / n)
    return u, _cross3(w, u)


def _eigvec_from_cross3(rows, lam):
    (a00, a01, a02), (_, a11, a12), (_, _, a22) = rows
    r0 = (a00 - lam, a01, a02)
    r1 = (a01, a11 - lam, a12)
    r2 = (a02, a12, a22 - lam)
    c01 = _cross3(r0, r1)
    c02 = _cross3(r0, r2)
    c12 = _cross3(r1, r2)
    n01 = _dot3(c01, c01)
    n02 = _dot3(c02, c02)
    n12 = _dot3(c12, c12)
    if n01 >= n02 and n01 >= n12:
        best, nsq = c01, n01
    elif n02 >= n12:
        best, nsq = c02, n02
    else:
        best, nsq = c12, n12
    if nsq == 0.0:
        return (0.0, 0.0, 0.0), 0.0
    n = math.sqrt(nsq)
    return (best[0] / n, best[1] / n, best[2] / n), n


def _eig_sym3_core(a00, a01, a02, a11, a12, a22):
    """Scalar analytic eigensolver; returns (values ascending, row vectors)."""
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    q = (a00 + a11 + a22) / 3.0
    if p1 == 0.0:
        pairs = sorted(((a00, 0), (a11, 1), (a22, 2)), key=lambda t: (t[0], t[1]))
        vals = tuple(p[0] for p in pairs)
        basis = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
        return vals, tuple(basis[p[1]] for p in pairs)

    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    b00, b11, b22 = (a00 - q) / p, (a11 - q) / p, (a22 - q) / p
    b01, b02, b12 = a01 / p, a02 / p, a12 / p
    detb = (
        b00 * (b11 * b22 - b12 * b12)
        - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02)
    )
    r = min(1.0, max(-1.0, detb / 2.0))
    phi = math.acos(r) / 3.0

    lam_hi = q + 2.0 * p * math.cos(phi)
    lam_lo = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    lam_mid = 3.0 * q - lam_hi - lam_lo
    vals = (lam_lo, lam_mid, lam_hi)

    scale = max(1.0, abs(lam_hi), abs(lam_lo))
    tol = _REPEATED_EIG_TOL * scale
    rows = ((a00, a01, a02), (a01, a11, a12), (a02, a12, a22))

    if lam_hi - lam_lo <= tol:
        # all three repeated: matrix ~ q I
        return vals, ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    if lam_mid - lam_lo <= tol:
        v_hi, _ = _eigvec_from_cross3(rows, lam_hi)
        u, v = _orthonormal_complement3(v_hi)
        vecs = (u, v, v_hi)
    elif lam_hi - lam_mid <= tol:
        v_lo, _ = _eigvec_from_cross3(rows, lam_lo)
        u, v = _orthonormal_complement3(v_lo)
        vecs = (v_lo, u, v)
    else:
        # all distinct: anchor on the better-conditioned extreme, derive the rest
        v_lo, n_lo = _eigvec_from_cross3(rows, lam_lo)
        v_hi, n_hi = _eigvec_from_cross3(rows, lam_hi)
        if n_lo >= n_hi:
            d = _dot3(v_lo, v_hi)
            v_hi = _normalize3(
                (v_hi[0] - d * v_lo[0], v_hi[1] - d * v_lo[1], v_hi[2] - d * v_lo[2])
            )
        else:
            d = _dot3(v_hi, v_lo)
            v_lo = _normalize3(
                (v_lo[0] - d * v_hi[0], v_lo[1] - d * v_hi[1], v_lo[2] - d * v_hi[2])
            )
        vecs = (v_lo, _cross3(v_hi, v_lo), v_hi)

    return vals, tuple(_fix_sign3(v) for v in vecs)


def eig_sym3(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric 3x3 matrix, analytic and deterministic.

    Returns eigenvalues ascending and the matching orthonormal eigenvectors
    as columns. Uses the trigonometric solution of the characteristic
    polynomial; eigenvalues closer than 1e-12 (relative to the spectral
    scale) are treated as repeated and get a deterministic basis.
    """
    a = np.asarray(a, dtype=np.float64)
    vals, vecs = _eig_sym3_core(
        float(a[0, 0]), float(a[0, 1]), float(a[0, 2]),
        float(a[1, 1]), float(a[1, 2]), float(a[2, 2]),
    )
    return np.array(vals), np.array(vecs).T


def _plane_unchecked(nx, ny, nz, offset, flatness) -> PlaneModel:
    # fast construction for normals that are unit by construction
    plane = PlaneModel.__new__(PlaneModel)
    object.__setattr__(plane, "normal", np.array((nx, ny, nz)))
    object.__setattr__(plane, "offset", float(offset))
    object.__setattr__(plane, "flatness", float(flatness))
    return plane


def _fit_plane_core(pts: np.ndarray) -> PlaneModel:
    """Hot-path plane fit on an (m, 3) float64 array, m >= 3 assumed."""
    m = len(pts)
    centroid = np.add.reduce(pts, axis=0)
    centroid /= m
    d = pts - centroid
    cov = d.T @ d  # unnormalized scatter; eigenvectors and ratios unchanged
    vals, vecs = _eig_sym3_core(
        cov[0, 0], cov[0, 1], cov[0, 2], cov[1, 1], cov[1, 2], cov[2, 2]
    )
    if vals[1] <= max(1e-30, 1e-10 * max(vals[2], 0.0)):
        raise DegenerateGeometry("points are collinear or coincident")

    nx, ny, nz = vecs[0]
    if nz < 0 or (nz == 0 and (nx < 0 or (nx == 0 and ny < 0))):
        nx, ny, nz = -nx, -ny, -nz
    offset = -(nx * centroid[0] + ny * centroid[1] + nz * centroid[2])
    total = vals[0] + vals[1] + vals[2]
    flatness = max(vals[0], 0.0) / total if total > 0 else 0.0
    return _plane_unchecked(nx, ny, nz, offset, flatness)


def fit_plane_pca(points: np.ndarray) -> PlaneModel:
    """Least-squares plane through points via covariance eigen-decomposition.

    The normal is the smallest-eigenvalue eigenvector, sign-flipped into the
    +z hemisphere; offset = -normal . centroid.

    Raises TooFewPoints for fewer than three points and DegenerateGeometry
    when the points are collinear (covariance rank < 2).
    """
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise TooFewPoints(f"plane fit needs >= 3 points, got {len(pts)}")
    return _fit_plane_core(pts)


# ---------------------------------------------------------------------------
# SE(3) operations
# ---------------------------------------------------------------------------


def pose_compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """a then b: (a*b)(p) = a(b(p))."""
    return RigidPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(a: RigidPose) -> RigidPose:
    rt = a.rotation.T
    return RigidPose(rt, -(rt @ a.translation))


def pose_apply(a: RigidPose, cloud: PointCloud) -> PointCloud:
    return PointCloud(
        cloud.xyz @ a.rotation.T + a.translation,
        cloud.intensity,
        cloud.labels,
        cloud.frame_id,
    )


def transform_points(a: RigidPose, xyz: np.ndarray) -> np.ndarray:
    return xyz @ a.rotation.T + a.translation


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix."""
    r = np.asarray(rotation, dtype=np.float64)
    cos_angle = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
    angle = math.acos(cos_angle)
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < 1e-8:
        return 0.5 * skew
    if math.pi - angle < 1e-6:
        # near pi the skew part vanishes; recover the axis from the diagonal
        diag = np.diag(r)
        k = int(np.argmax(diag))
        axis = np.zeros(3)
        axis[k] = math.sqrt(max(0.0, (diag[k] + 1.0) / 2.0))
        denom = 2.0 * axis[k]
        if k == 0:
            axis[1] = (r[0, 1] + r[1, 0]) / (2.0 * denom)
            axis[2] = (r[0, 2] + r[2, 0]) / (2.0 * denom)
        elif k == 1:
            axis[0] = (r[0, 1] + r[1, 0]) / (2.0 * denom)
            axis[2] = (r[1, 2] + r[2, 1]) / (2.0 * denom)
        else:
            axis[0] = (r[0, 2] + r[2, 0]) / (2.0 * denom)
            axis[1] = (r[1, 2] + r[2, 1]) / (2.0 * denom)
        axis /= np.linalg.norm(axis)
        if skew @ axis < 0:
            axis = -axis
        return axis * angle
    return skew * (angle / (2.0 * math.sin(angle)))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def so3_exp(omega: np.ndarray) -> np.ndarray:
    w = np.asarray(omega, dtype=np.float64)
    angle = float(np.linalg.norm(w))
    k = _skew(w)
    k2 = k @ k
    if angle < 1e-8:
        return np.eye(3) + k + 0.5 * k2
    s = math.sin(angle) / angle
    c = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + s * k + c * k2


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    k = _skew(omega)
    k2 = k @ k
    if angle < 1e-8:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    a2 = angle * angle
    c1 = (1.0 - math.cos(angle)) / a2
    c2 = (angle - math.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * k + c2 * k2


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    k = _skew(omega)
    k2 = k @ k
    if angle < 1e-8:
        return np.eye(3) - 0.5 * k + k2 / 12.0
    half = angle / 2.0
    cot = half / math.tan(half)
    coeff = (1.0 - cot) / (angle * angle)
    return np.eye(3) - 0.5 * k + coeff * k2


def pose_log(a: RigidPose) -> np.ndarray:
    """SE(3) logarithm as a 6-vector [omega, rho] (rotation part first)."""
    omega = so3_log(a.rotation)
    rho = _left_jacobian_inv(omega) @ a.translation
    return np.concatenate([omega, rho])


def pose_exp(xi: np.ndarray) -> RigidPose:
    """Inverse of pose_log on the ball ||omega|| < pi."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    omega, rho = xi[:3], xi[3:]
    return RigidPose(so3_exp(omega), _left_jacobian(omega) @ rho)


def rotation_geodesic_error(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cos_angle = (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0) / 2.0
    cos_angle = min(1.0, max(-1.0, cos_angle))
    return math.degrees(math.acos(cos_angle))


# ---------------------------------------------------------------------------
# voxel downsampling (shared by map assembly and the matcher)
# ---------------------------------------------------------------------------


def voxel_keys(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(xyz / voxel_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Centroid-per-voxel downsampling with deterministic voxel ordering.

    Output voxels are sorted by integer key (x, then y, then z). Labels, when
    present, are reduced per voxel by majority vote (ties go to the smallest
    label value); intensity is averaged.
    """
    n = len(cloud)
    if n == 0:
        return cloud
    keys = voxel_keys(cloud.xyz, voxel_size)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    boundaries = np.flatnonzero(np.any(sk[1:] != sk[:-1], axis=1)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])

    sums = np.add.reduceat(cloud.xyz[order], starts, axis=0)
    counts = (ends - starts).astype(np.float64)
    xyz = sums / counts[:, None]

    intensity = None
    if cloud.intensity is not None:
        intensity = np.add.reduceat(cloud.intensity[order], starts) / counts

    labels = None
    if cloud.labels is not None:
        src = cloud.labels[order]
        labels = np.empty(len(starts), dtype=np.uint8)
        for i, (s, e) in enumerate(zip(starts, ends)):
            labels[i] = np.bincount(src[s:e]).argmax()

    return PointCloud(xyz, intensity, labels, cloud.frame_id)
