"""Outlier-robust global registration.

Pipeline: ground points are pruned (they are featureless and breed bogus
matches), putative correspondences are turned into translation-invariant
measurements (TIMs), a graduated non-convexity (GNC) truncated-least-squares
solver estimates the rotation (full SO(3) or yaw-only), and the translation
is recovered per axis by consensus voting. The solver tolerates a large
majority of gross outliers among the correspondences.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    AllMeasurementsRejected,
    EmptyConsensus,
    MatchingFailed,
    TooFewCorrespondences,
)
from .geometry import PointCloud, RigidPose, fit_plane_pca
from .ground import CzmParams, segment_ground


@dataclass(frozen=True)
class CorrespondenceSet:
    """Putative point pairs; may contain a majority of outliers."""

    source: np.ndarray  # (n, 3)
    target: np.ndarray  # (n, 3)

    def __post_init__(self) -> None:
        s = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        if len(s) != len(t):
            raise ValueError("source/target pair counts differ")
        if not (np.isfinite(s).all() and np.isfinite(t).all()):
            raise ValueError("correspondences must be finite")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)

    def __len__(self) -> int:
        return len(self.source)


class EdgeKind(enum.Enum):
    CHAIN = "chain"
    COMPLETE = "complete"
    K_NEAREST = "k-nearest"


@dataclass(frozen=True)
class EdgeSet:
    kind: EdgeKind
    k: int = 10

    @staticmethod
    def chain() -> "EdgeSet":
        return EdgeSet(EdgeKind.CHAIN)

    @staticmethod
    def complete() -> "EdgeSet":
        return EdgeSet(EdgeKind.COMPLETE)

    @staticmethod
    def k_nearest(k: int = 10) -> "EdgeSet":
        return EdgeSet(EdgeKind.K_NEAREST, k)


def default_edge_set(n: int) -> EdgeSet:
    return EdgeSet.complete() if n <= 200 else EdgeSet.k_nearest(10)


@dataclass(frozen=True)
class TimSet:
    """Translation-invariant measurements over correspondence-graph edges."""

    a: np.ndarray      # (m, 3) source-side differences
    b: np.ndarray      # (m, 3) target-side differences
    edges: np.ndarray  # (m, 2) correspondence index pairs, lexicographic
    edge_set: EdgeSet

    def __len__(self) -> int:
        return len(self.a)


class RotationMode(enum.Enum):
    FULL_SO3 = "full"
    QUASI_SO3 = "quasi"


@dataclass(frozen=True)
class GncParams:
    """Graduated non-convexity truncated-least-squares settings.

    length_gate zeroes measurements whose source/target lengths differ by
    more than 2x the noise bound up front; such edges are rotation- and
    translation-invariant inconsistent, so no rigid motion can explain them.
    """

    noise_bound: float = 0.1
    mu_update_factor: float = 1.4
    max_iterations: int = 100
    cost_tolerance: float = 1e-6
    rotation_mode: RotationMode = RotationMode.QUASI_SO3
    length_gate: bool = True

    def __post_init__(self) -> None:
        if self.noise_bound <= 0:
            raise ValueError("noise_bound must be > 0")
        if self.mu_update_factor <= 1:
            raise ValueError("mu_update_factor must be > 1")


@dataclass
class GncRotationResult:
    rotation: np.ndarray
    weights: np.ndarray
    converged: bool
    iterations: int
    # surrogate cost before/after each fixed-mu alternation, for descent checks
    surrogate_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    surrogate_out: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class RegistrationResult:
    """Pose mapping source into the target frame plus solver diagnostics.

    inlier_indices are correspondence indices accepted by the translation
    consensus; final_weights are the per-TIM GNC weights.
    """

    pose: RigidPose
    inlier_indices: np.ndarray
    final_weights: np.ndarray
    converged: bool
    iterations: int


def prune_with_ground_segmentation(
    source: PointCloud, target: PointCloud, params: CzmParams = CzmParams()
) -> tuple[PointCloud, PointCloud]:
    """Drop ground (and out-of-range) points from both clouds before matching."""
    out = []
    for cloud in (source, target):
        if len(cloud) == 0:
            out.append(cloud)
            continue
        seg = segment_ground(cloud, params)
        keep = np.setdiff1d(seg.nonground_indices, seg.out_of_range_indices,
                            assume_unique=True)
        out.append(cloud.select(keep))
    return out[0], out[1]


def build_tims(corrs: CorrespondenceSet, edge_set: EdgeSet | None = None) -> TimSet:
    """Pairwise differences over a deterministic correspondence-graph edge set."""
    n = len(corrs)
    if n < 2:
        raise TooFewCorrespondences(f"need >= 2 correspondences, got {n}")
    if edge_set is None:
        edge_set = default_edge_set(n)

    if edge_set.kind is EdgeKind.CHAIN:
        i = np.arange(n - 1)
        edges = np.column_stack([i, i + 1])
    elif edge_set.kind is EdgeKind.COMPLETE:
        i, j = np.triu_indices(n, k=1)
        edges = np.column_stack([i, j])
    else:
        k = min(edge_set.k, n - 1)
        tree = cKDTree(corrs.source)
        _, nbr = tree.query(corrs.source, k=k + 1)
        nbr = np.atleast_2d(nbr)
        src = np.repeat(np.arange(n), k + 1)
        dst = nbr.ravel()
        keep = src != dst
        pairs = np.column_stack([src[keep], dst[keep]])
        pairs.sort(axis=1)
        edges = np.unique(pairs, axis=0)

    # lexicographic edge order
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]
    a = corrs.source[edges[:, 1]] - corrs.source[edges[:, 0]]
    b = corrs.target[edges[:, 1]] - corrs.target[edges[:, 0]]
    return TimSet(a, b, edges, edge_set)


def gnc_weight_update(residual_sq: np.ndarray, noise_bound: float, mu: float) -> np.ndarray:
    """Closed-form truncated-least-squares weights for the GNC surrogate.

    w = 1 in the inlier band r^2 <= mu/(mu+1) eps^2, w = 0 in the outlier
    band r^2 >= (mu+1)/mu eps^2, and interpolates in between.
    """
    r2 = np.asarray(residual_sq, dtype=np.float64)
    eps2 = noise_bound * noise_bound
    lo = mu / (mu + 1.0) * eps2
    hi = (mu + 1.0) / mu * eps2
    with np.errstate(divide="ignore", invalid="ignore"):
        mid = noise_bound * math.sqrt(mu * (mu + 1.0)) / np.sqrt(r2) - mu
    w = np.where(r2 <= lo, 1.0, np.where(r2 >= hi, 0.0, mid))
    return np.clip(w, 0.0, 1.0)


def _solve_rotation_full(a, b, w):
    h = (a * w[:, None]).T @ b
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    if d == 0:
        d = 1.0
    return v @ np.diag([1.0, 1.0, d]) @ u.T


def _solve_rotation_yaw(a, b, w):
    s = float(np.sum(w * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])))
    c = float(np.sum(w * (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])))
    if s == 0.0 and c == 0.0:
        return np.eye(3)
    return RigidPose.from_yaw(math.atan2(s, c)).rotation


def _tls_surrogate(r2, w, noise_bound, mu):
    eps2 = noise_bound * noise_bound
    return float(np.sum(w * r2) + eps2 * np.sum(mu * (1.0 - w) / (mu + w)))


def gnc_rotation(tims: TimSet, params: GncParams) -> GncRotationResult:
    """Rotation from TIMs by GNC truncated least squares.

    Alternates a weighted rotation solve (orthogonal Procrustes in full
    mode, 2-D Procrustes yielding yaw in quasi mode) with the closed-form
    weight update, annealing mu from a near-convex start.
    """
    m = len(tims)
    if m < 1:
        raise TooFewCorrespondences("need >= 1 measurement")
    a, b = tims.a, tims.b
    eps = params.noise_bound

    gate = np.ones(m, dtype=bool)
    if params.length_gate:
        gate = np.abs(np.linalg.norm(a, axis=1) - np.linalg.norm(b, axis=1)) <= 2.0 * eps
        if not gate.any():
            raise AllMeasurementsRejected("length gate removed every measurement")

    solve = (_solve_rotation_yaw if params.rotation_mode is RotationMode.QUASI_SO3
             else _solve_rotation_full)

    w = gate.astype(np.float64)
    rotation = solve(a, b, w)
    diff = b - a @ rotation.T
    r2 = np.einsum("ij,ij->i", diff, diff)

    r2max = float(r2[gate].max())
    eps2 = eps * eps
    denom = 2.0 * r2max - eps2
    mu = 1e12 if denom <= 0 else max(eps2 / denom, 1e-4)

    surrogate_in, surrogate_out = [], []
    converged = False
    prev_cost = None
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        surrogate_in.append(_tls_surrogate(r2[gate], w[gate], eps, mu))
        w = gnc_weight_update(r2, eps, mu)
        w[~gate] = 0.0
        if w.sum() == 0.0:
            raise AllMeasurementsRejected("all weights are zero")
        rotation = solve(a, b, w)
        diff = b - a @ rotation.T
        r2 = np.einsum("ij,ij->i", diff, diff)
        cost = _tls_surrogate(r2[gate], w[gate], eps, mu)
        surrogate_out.append(cost)
        if prev_cost is not None and abs(prev_cost - cost) <= params.cost_tolerance * max(
            abs(prev_cost), 1e-12
        ):
            converged = True
            break
        prev_cost = cost
        mu = min(mu * params.mu_update_factor, 1e12)

    return GncRotationResult(
        rotation, w, converged, iterations,
        np.asarray(surrogate_in), np.asarray(surrogate_out),
    )


def _component_vote(values: np.ndarray, eps: float) -> tuple[float, int]:
    """Max-consensus interval of width 2*eps; ties resolved to the lowest start."""
    sv = np.sort(values, kind="stable")
    ends = np.searchsorted(sv, sv + 2.0 * eps, side="right")
    counts = ends - np.arange(len(sv))
    best = int(np.argmax(counts))  # first occurrence = lowest window start
    members = sv[best:ends[best]]
    return float((members[0] + members[-1]) / 2.0), int(counts[best])


def estimate_translation(
    corrs: CorrespondenceSet,
    rotation: np.ndarray,
    noise_bound: float,
    quorum: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Component-wise consensus translation after the rotation is known.

    Each axis votes independently for the interval of width 2*noise_bound
    holding the most residuals. Raises EmptyConsensus when any axis has
    fewer than `quorum` votes in its best interval.
    """
    s = corrs.target - corrs.source @ np.asarray(rotation).T
    t = np.zeros(3)
    for axis in range(3):
        t[axis], count = _component_vote(s[:, axis], noise_bound)
        if count < quorum:
            raise EmptyConsensus(
                f"axis {axis} consensus has {count} votes (quorum {quorum})"
            )
    inliers = np.flatnonzero(np.all(np.abs(s - t) <= noise_bound, axis=1))
    return t, inliers


def _align_ground_normals(rotation, source_ground, target_ground):
    """Roll/pitch correction aligning the rotated source ground normal with
    the target's; optional post-step for quasi-SO(3) outputs."""
    ns = fit_plane_pca(source_ground).normal
    nt = fit_plane_pca(target_ground).normal
    ns_rot = rotation @ ns
    v = np.cross(ns_rot, nt)
    s = np.linalg.norm(v)
    c = float(np.dot(ns_rot, nt))
    if s < 1e-12:
        return rotation
    axis = v / s
    angle = math.atan2(s, c)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    r_fix = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
    return r_fix @ rotation


@dataclass
class RegisterOptions:
    gnc: GncParams = field(default_factory=GncParams)
    czm: CzmParams = field(default_factory=CzmParams)
    use_ground_pruning: bool = True
    correspondences: CorrespondenceSet | None = None
    edge_set: EdgeSet | None = None
    matcher: "MatcherParams | None" = None
    translation_quorum: int = 3
    align_ground_normals: bool = False


def register(
    source: PointCloud, target: PointCloud, opts: RegisterOptions | None = None
) -> RegistrationResult:
    """End-to-end robust registration: prune, match, TIMs, GNC, translation.

    The matching stage is pluggable: supply opts.correspondences to bypass
    the built-in descriptor matcher. The returned pose maps source points
    into the target frame.
    """
    from .features import MatcherParams, match_clouds  # local import, cycle-free

    opts = opts or RegisterOptions()

    corrs = opts.correspondences
    src_ground = tgt_ground = None
    if corrs is None:
        src, tgt = source, target
        if opts.use_ground_pruning:
            src, tgt = prune_with_ground_segmentation(source, target, opts.czm)
        if opts.align_ground_normals:
            seg_s = segment_ground(source, opts.czm)
            seg_t = segment_ground(target, opts.czm)
            if len(seg_s.ground_indices) >= 3 and len(seg_t.ground_indices) >= 3:
                src_ground = source.xyz[seg_s.ground_indices]
                tgt_ground = target.xyz[seg_t.ground_indices]
        if len(src) < 2 or len(tgt) < 2:
            raise MatchingFailed("too few points after pruning")
        corrs = match_clouds(src, tgt, opts.matcher or MatcherParams())
    if len(corrs) < 2:
        raise MatchingFailed(f"only {len(corrs)} putative matches")

    tims = build_tims(corrs, opts.edge_set)
    rot = gnc_rotation(tims, opts.gnc)
    rotation = rot.rotation
    if opts.align_ground_normals and src_ground is not None and tgt_ground is not None:
        rotation = _align_ground_normals(rotation, src_ground, tgt_ground)
    translation, inliers = estimate_translation(
        corrs, rotation, opts.gnc.noise_bound, opts.translation_quorum
    )
    return RegistrationResult(
        RigidPose(rotation, translation), inliers, rot.weights, rot.converged,
        rot.iterations,
    )
