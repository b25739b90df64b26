"""Region-wise cascaded ground segmentation over a concentric-zone polar grid.

Bins are processed ring by ring from the sensor outward. Each bin selects
low seeds, rejects seeds that fall too far below the ground planes already
accepted in the adjacent inner ring (reflected-noise rejection), fits a
plane, and keeps the bin's ground points only when the plane is upright
enough. Bins with no accepted inner neighbors fall back to a virtual
horizontal plane at a robust global ground-height estimate so the first
populated ring is not defenseless against under-ground noise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateGeometry, NoValidSeeds, TooFewPoints
from .geometry import PlaneModel, PointCloud, _fit_plane_core, fit_plane_pca


@dataclass(frozen=True)
class CzmParams:
    """Concentric-zone-model binning and plane-acceptance parameters."""

    min_range: float = 1.0
    max_range: float = 80.0
    zone_boundaries: tuple[float, ...] = (1.0, 10.0, 20.0, 40.0, 80.0)
    rings_per_zone: tuple[int, ...] = (4, 4, 4, 4)
    sectors_per_zone: tuple[int, ...] = (16, 32, 32, 16)
    seed_count: int = 20
    seed_margin: float = 0.5
    dist_threshold: float = 0.125
    uprightness_min: float = math.cos(math.radians(40.0))
    noise_rejection_margin: float = 0.3
    use_cascade: bool = True
    flatness_max: float = 0.0  # 0 disables the optional flatness gate

    def __post_init__(self) -> None:
        b = self.zone_boundaries
        if len(b) < 2 or any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("zone_boundaries must be strictly ascending")
        if b[0] != self.min_range or b[-1] != self.max_range:
            raise ValueError("zone_boundaries must span [min_range, max_range]")
        nz = len(b) - 1
        if len(self.rings_per_zone) != nz or len(self.sectors_per_zone) != nz:
            raise ValueError("rings/sectors lists must match the zone count")
        if any(c < 1 for c in self.rings_per_zone + self.sectors_per_zone):
            raise ValueError("ring and sector counts must be >= 1")


class BinId(NamedTuple):
    zone: int
    ring: int
    sector: int


class BinStatus(enum.Enum):
    ACCEPTED = "accepted-upright"
    REJECTED_TILTED = "rejected-tilted"
    REJECTED_FLATNESS = "rejected-flatness"
    EMPTY = "empty"


@dataclass(frozen=True)
class BinPlane:
    status: BinStatus
    plane: PlaneModel | None = None


@dataclass
class GroundSegmentation:
    """Disjoint ground/nonground index sets plus per-bin plane verdicts.

    nonground_indices includes the out-of-range points (also reported
    separately); ground and nonground jointly cover every input index.
    """

    ground_indices: np.ndarray
    nonground_indices: np.ndarray
    bin_planes: dict[BinId, BinPlane]
    out_of_range_indices: np.ndarray
    n_points: int

    def ground_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_points, dtype=bool)
        mask[self.ground_indices] = True
        return mask


def build_czm(
    cloud: PointCloud, params: CzmParams
) -> tuple[dict[BinId, np.ndarray], np.ndarray]:
    """Assign each in-range point to exactly one polar bin.

    Returns (bin -> index array, out-of-range index array). Ranges are
    horizontal (polar radius); zones come from zone_boundaries, rings split
    each zone uniformly in radius, sectors split azimuth uniformly.
    """
    keys, in_range, _layout = _bin_keys(cloud.xyz, params)
    out_of_range = np.flatnonzero(~in_range)
    bins: dict[BinId, np.ndarray] = {}
    idx_in = np.flatnonzero(in_range)
    if len(idx_in) == 0:
        return bins, out_of_range
    order = np.argsort(keys[in_range], kind="stable")
    sorted_keys = keys[in_range][order]
    sorted_idx = idx_in[order]
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_keys)) + 1])
    ends = np.concatenate([starts[1:], [len(sorted_keys)]])
    for s, e in zip(starts, ends):
        bins[_layout.bin_id(int(sorted_keys[s]))] = sorted_idx[s:e]
    return bins, out_of_range


class _GridLayout:
    """Flat-key arithmetic for the concentric zone model."""

    def __init__(self, params: CzmParams):
        self.params = params
        self.zone_offsets = []
        total = 0
        for rings, sectors in zip(params.rings_per_zone, params.sectors_per_zone):
            self.zone_offsets.append(total)
            total += rings * sectors
        self.total_bins = total

    def bin_id(self, key: int) -> BinId:
        for z in reversed(range(len(self.zone_offsets))):
            if key >= self.zone_offsets[z]:
                rel = key - self.zone_offsets[z]
                sectors = self.params.sectors_per_zone[z]
                return BinId(z, rel // sectors, rel % sectors)
        raise ValueError(f"bad bin key {key}")

    def key_of(self, b: BinId) -> int:
        return self.zone_offsets[b.zone] + b.ring * self.params.sectors_per_zone[b.zone] + b.sector

    def global_rings(self):
        """(zone, ring) pairs in cascade order, innermost first."""
        out = []
        for z, rings in enumerate(self.params.rings_per_zone):
            out.extend((z, r) for r in range(rings))
        return out


def _bin_keys(xyz: np.ndarray, params: CzmParams):
    layout = _GridLayout(params)
    n = len(xyz)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool), layout
    r = np.hypot(xyz[:, 0], xyz[:, 1])
    in_range = (r >= params.min_range) & (r <= params.max_range)
    b = np.asarray(params.zone_boundaries)
    zone = np.searchsorted(b[1:-1], r, side="right")
    rings = np.asarray(params.rings_per_zone)
    sectors = np.asarray(params.sectors_per_zone)
    zmin = b[zone]
    width = (b[zone + 1] - b[zone]) / rings[zone]
    ring = np.clip(((r - zmin) / width).astype(np.int64), 0, rings[zone] - 1)
    az = np.arctan2(xyz[:, 1], xyz[:, 0])
    az = np.where(az < 0, az + 2.0 * math.pi, az)
    sector = np.clip(
        (az / (2.0 * math.pi / sectors[zone])).astype(np.int64), 0, sectors[zone] - 1
    )
    offsets = np.asarray(layout.zone_offsets)
    keys = offsets[zone] + ring * sectors[zone] + sector
    keys = np.where(in_range, keys, -1)
    return keys, in_range, layout


def _admissible_mask(xyz: np.ndarray, neighbors: list[PlaneModel], margin: float):
    """Points not lying more than margin below the mean neighbor ground height.

    Returns None when there are no neighbors (everything admissible). The
    per-neighbor height maps are affine in (x, y), so their mean is folded
    into one set of coefficients.
    """
    if not neighbors:
        return None
    ax = ay = c = 0.0
    for plane in neighbors:
        nx, ny, nz = plane.normal
        ax -= nx / nz
        ay -= ny / nz
        c -= plane.offset / nz
    k = len(neighbors)
    return xyz[:, 2] >= (ax * xyz[:, 0] + ay * xyz[:, 1] + c) / k - margin


def _select_seeds(xyz: np.ndarray, admissible: np.ndarray | None, params: CzmParams):
    if admissible is None:
        cand_pos = None
        z = xyz[:, 2]
    else:
        cand_pos = np.flatnonzero(admissible)
        if len(cand_pos) == 0:
            return cand_pos
        z = xyz[cand_pos, 2]
    within = z <= z.min() + params.seed_margin
    cand_pos = np.flatnonzero(within) if cand_pos is None else cand_pos[within]
    z = z[within]
    k = params.seed_count
    if len(z) <= k:
        return cand_pos
    # k lowest by (z, point index): threshold via partition, ties by index
    kth = np.partition(z, k - 1)[k - 1]
    below = z < kth
    seeds = cand_pos[below]
    ties = cand_pos[z == kth][: k - len(seeds)]
    return np.concatenate([seeds, ties])


def estimate_bin_plane(
    bin_indices: np.ndarray,
    cloud: PointCloud,
    neighbor_planes: list[PlaneModel],
    params: CzmParams = CzmParams(),
) -> tuple[PlaneModel, np.ndarray]:
    """Fit one bin's ground plane and return (plane, ground index subset).

    Seeds are the lowest admissible points; candidates lying more than
    noise_rejection_margin below the averaged neighbor planes are rejected
    as reflected noise. Raises NoValidSeeds when fewer than three seed
    candidates survive.
    """
    idx = np.asarray(bin_indices)
    if len(idx) == 0:
        raise NoValidSeeds("bin is empty")
    xyz = cloud.xyz[idx]
    adm = _admissible_mask(xyz, neighbor_planes, params.noise_rejection_margin)
    seeds = _select_seeds(xyz, adm, params)
    if len(seeds) < 3:
        raise NoValidSeeds(f"only {len(seeds)} seed candidates survive noise rejection")
    try:
        plane = fit_plane_pca(xyz[seeds])
    except (TooFewPoints, DegenerateGeometry) as exc:
        raise NoValidSeeds(str(exc)) from exc
    ground = idx[np.abs(plane.signed_distance(xyz)) <= params.dist_threshold]
    return plane, ground


def _ground_height_from_z(z: np.ndarray, bin_width: float = 0.1) -> float | None:
    if len(z) == 0:
        return None
    lo = float(z.min())
    sel = z[z <= lo + 4.0]
    edges = np.arange(lo, float(sel.max()) + 2 * bin_width, bin_width)
    hist, _ = np.histogram(sel, bins=edges)
    k = int(hist.argmax())
    center = (edges[k] + edges[k + 1]) / 2.0
    # refine within the winning coarse bin
    near = sel[np.abs(sel - center) <= bin_width]
    fine = bin_width / 8.0
    fedges = np.arange(center - bin_width, center + bin_width + fine, fine)
    fhist, _ = np.histogram(near, bins=fedges)
    j = int(fhist.argmax())
    return float((fedges[j] + fedges[j + 1]) / 2.0)


def estimate_ground_height(
    cloud: PointCloud, params: CzmParams, bin_width: float = 0.1
) -> float | None:
    """Robust global ground height: mode of the in-range low-z histogram.

    Used to bootstrap the cascade in bins that have no accepted inner-ring
    neighbors. Returns None for clouds with no in-range points.
    """
    r = np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1])
    z = cloud.xyz[(r >= params.min_range) & (r <= params.max_range), 2]
    return _ground_height_from_z(z, bin_width)


def _inner_neighbor_planes(
    layout: _GridLayout,
    accepted: dict[BinId, PlaneModel],
    zone: int,
    ring: int,
    sector: int,
) -> list[PlaneModel]:
    params = layout.params
    if ring > 0:
        iz, ir = zone, ring - 1
    elif zone > 0:
        iz, ir = zone - 1, params.rings_per_zone[zone - 1] - 1
    else:
        return []
    s_out = params.sectors_per_zone[zone]
    s_in = params.sectors_per_zone[iz]
    az_center = (sector + 0.5) * 2.0 * math.pi / s_out
    s0 = int(az_center / (2.0 * math.pi / s_in)) % s_in
    planes = []
    for ds in (-1, 0, 1):
        plane = accepted.get(BinId(iz, ir, (s0 + ds) % s_in))
        if plane is not None:
            planes.append(plane)
    return planes


def segment_ground(cloud: PointCloud, params: CzmParams = CzmParams()) -> GroundSegmentation:
    """Cascaded region-wise ground segmentation.

    Rings are processed from the sensor outward; each bin reuses the
    accepted planes of the adjacent inner ring (same azimuth +-1 sector) to
    reject reflected noise below the ground. Bins whose plane is not upright
    enough contribute no ground points. Out-of-range points are nonground.
    """
    n = len(cloud)
    keys, in_range, layout = _bin_keys(cloud.xyz, params)
    if n == 0:
        return GroundSegmentation(
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), {},
            np.zeros(0, dtype=np.int64), 0,
        )

    idx_in = np.flatnonzero(in_range)
    order = np.argsort(keys[idx_in], kind="stable")
    sorted_idx = idx_in[order]
    sorted_keys = keys[idx_in][order]
    sorted_xyz = cloud.xyz[sorted_idx]

    # bin key -> slice of the sorted arrays
    slices: dict[int, tuple[int, int]] = {}
    if len(sorted_keys):
        starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_keys)) + 1])
        ends = np.concatenate([starts[1:], [len(sorted_keys)]])
        for s, e in zip(starts, ends):
            slices[int(sorted_keys[s])] = (int(s), int(e))

    bootstrap = None
    if params.use_cascade:
        h0 = _ground_height_from_z(sorted_xyz[::2, 2] if len(sorted_xyz) > 20000 else sorted_xyz[:, 2])
        if h0 is not None:
            bootstrap = PlaneModel(np.array([0.0, 0.0, 1.0]), -h0)

    ground_sorted = np.zeros(len(sorted_idx), dtype=bool)
    bin_planes: dict[BinId, BinPlane] = {}
    accepted: dict[BinId, PlaneModel] = {}
    thresh = params.dist_threshold

    for zone, ring in layout.global_rings():
        sectors = params.sectors_per_zone[zone]
        for sector in range(sectors):
            bid = BinId(zone, ring, sector)
            sl = slices.get(layout.key_of(bid))
            if sl is None:
                continue
            s, e = sl
            if e - s < 3:
                bin_planes[bid] = BinPlane(BinStatus.EMPTY)
                continue
            xyz = sorted_xyz[s:e]
            neighbors: list[PlaneModel] = []
            if params.use_cascade:
                neighbors = _inner_neighbor_planes(layout, accepted, zone, ring, sector)
                if not neighbors and bootstrap is not None:
                    neighbors = [bootstrap]

            adm = _admissible_mask(xyz, neighbors, params.noise_rejection_margin)
            seeds = _select_seeds(xyz, adm, params)
            if len(seeds) < 3:
                bin_planes[bid] = BinPlane(BinStatus.EMPTY)
                continue
            try:
                plane = _fit_plane_core(xyz[seeds])
            except DegenerateGeometry:
                bin_planes[bid] = BinPlane(BinStatus.EMPTY)
                continue

            if plane.uprightness < params.uprightness_min:
                bin_planes[bid] = BinPlane(BinStatus.REJECTED_TILTED, plane)
                continue
            if params.flatness_max > 0 and plane.flatness > params.flatness_max:
                bin_planes[bid] = BinPlane(BinStatus.REJECTED_FLATNESS, plane)
                continue

            nx, ny, nz = plane.normal
            dist = xyz[:, 0] * nx + xyz[:, 1] * ny + xyz[:, 2] * nz + plane.offset
            np.abs(dist, out=dist)
            ground_sorted[s:e] = dist <= thresh
            bin_planes[bid] = BinPlane(BinStatus.ACCEPTED, plane)
            accepted[bid] = plane

    ground_mask = np.zeros(n, dtype=bool)
    ground_mask[sorted_idx[ground_sorted]] = True
    ground = np.flatnonzero(ground_mask)
    nonground = np.flatnonzero(~ground_mask)
    return GroundSegmentation(ground, nonground, bin_planes, np.flatnonzero(~in_range), n)
