"""Deterministic descriptor matching for the registration front end.

Voxel downsample, k-NN normals, a 33-bin fast-point-feature-histogram-style
descriptor, and mutual nearest-neighbor matching. The solver downstream is
outlier-robust, so this stage only has to produce a workable inlier fraction,
not a clean match set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import MatchingFailed
from .geometry import PointCloud, _fit_plane_core, voxel_downsample
from .registration import CorrespondenceSet


@dataclass(frozen=True)
class MatcherParams:
    voxel_size: float = 0.5
    normal_k: int = 20
    feature_k: int = 20
    max_points: int = 6000
    viewpoint: tuple[float, float, float] = (0.0, 0.0, 0.0)


def _downsample_capped(cloud: PointCloud, params: MatcherParams) -> PointCloud:
    voxel = params.voxel_size
    out = voxel_downsample(cloud, voxel)
    while len(out) > params.max_points:
        voxel *= 1.25
        out = voxel_downsample(cloud, voxel)
    return out


def estimate_normals(xyz: np.ndarray, k: int, viewpoint) -> np.ndarray:
    """Per-point unit normals from k-NN plane fits, oriented to the viewpoint."""
    n = len(xyz)
    tree = cKDTree(xyz)
    k_eff = min(k + 1, n)
    _, nbr = tree.query(xyz, k=k_eff)
    nbr = np.atleast_2d(nbr)
    normals = np.empty((n, 3))
    for i in range(n):
        pts = xyz[nbr[i]]
        try:
            normals[i] = _fit_plane_core(pts).normal
        except Exception:
            normals[i] = (0.0, 0.0, 1.0)
    flip = np.einsum("ij,ij->i", normals, np.asarray(viewpoint) - xyz) < 0
    normals[flip] *= -1.0
    return normals


def _spfh(xyz: np.ndarray, normals: np.ndarray, nbr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Simplified point feature histograms over the neighbor sets.

    Returns (n, 33) histograms and the (n, k) neighbor distances.
    """
    n, kk = nbr.shape
    p = xyz[:, None, :]
    q = xyz[nbr]
    d = q - p
    dist = np.linalg.norm(d, axis=2)
    dist_safe = np.where(dist > 1e-12, dist, 1.0)
    dhat = d / dist_safe[:, :, None]

    u = normals[:, None, :]
    nq = normals[nbr]
    v = np.cross(np.broadcast_to(u, d.shape), dhat)
    vnorm = np.linalg.norm(v, axis=2)
    v = v / np.where(vnorm > 1e-12, vnorm, 1.0)[:, :, None]
    w = np.cross(np.broadcast_to(u, d.shape), v)

    alpha = np.einsum("nkj,nkj->nk", v, nq)
    phi = np.einsum("nkj,nkj->nk", np.broadcast_to(u, d.shape), dhat)
    theta = np.arctan2(
        np.einsum("nkj,nkj->nk", w, nq), np.einsum("nkj,nkj->nk", np.broadcast_to(u, d.shape), nq)
    )

    def bin_idx(values, lo, hi):
        idx = ((values - lo) / (hi - lo) * 11.0).astype(np.int64)
        return np.clip(idx, 0, 10)

    ai = bin_idx(alpha, -1.0, 1.0)
    pi_ = bin_idx(phi, -1.0, 1.0)
    ti = bin_idx(theta, -math.pi, math.pi)

    hist = np.zeros((n, 33))
    rows = np.repeat(np.arange(n), kk)
    np.add.at(hist, (rows, ai.ravel()), 1.0)
    np.add.at(hist, (rows, 11 + pi_.ravel()), 1.0)
    np.add.at(hist, (rows, 22 + ti.ravel()), 1.0)
    return hist, dist


def compute_fpfh(xyz: np.ndarray, normals: np.ndarray, k: int) -> np.ndarray:
    """33-dimensional FPFH-style descriptors over k-NN neighborhoods."""
    n = len(xyz)
    tree = cKDTree(xyz)
    k_eff = min(k + 1, n)
    _, nbr = tree.query(xyz, k=k_eff)
    nbr = np.atleast_2d(nbr)[:, 1:]  # drop self
    spfh, dist = _spfh(xyz, normals, nbr)
    inv_w = 1.0 / np.where(dist > 1e-12, dist, 1e-12)
    fpfh = spfh + np.einsum("nk,nkd->nd", inv_w, spfh[nbr]) / nbr.shape[1]
    # per-block percentage normalization
    for lo in (0, 11, 22):
        block = fpfh[:, lo:lo + 11]
        sums = block.sum(axis=1, keepdims=True)
        block /= np.where(sums > 0, sums, 1.0)
    return fpfh


def _mutual_nearest(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Mutual nearest neighbors in descriptor space, chunked argmin."""
    na, nb = len(fa), len(fb)
    sq_a = np.einsum("ij,ij->i", fa, fa)
    sq_b = np.einsum("ij,ij->i", fb, fb)

    def argmin_rows(x, sq_x, y, sq_y):
        out = np.empty(len(x), dtype=np.int64)
        chunk = max(1, 2_000_000 // max(len(y), 1))
        for s in range(0, len(x), chunk):
            e = min(s + chunk, len(x))
            d = sq_x[s:e, None] - 2.0 * (x[s:e] @ y.T) + sq_y[None, :]
            out[s:e] = np.argmin(d, axis=1)
        return out

    a2b = argmin_rows(fa, sq_a, fb, sq_b)
    b2a = argmin_rows(fb, sq_b, fa, sq_a)
    ia = np.arange(na)
    mutual = b2a[a2b] == ia
    return np.column_stack([ia[mutual], a2b[mutual]])


def match_clouds(
    source: PointCloud, target: PointCloud, params: MatcherParams = MatcherParams()
) -> CorrespondenceSet:
    """Downsample, describe, and mutually match two clouds."""
    src = _downsample_capped(source, params)
    tgt = _downsample_capped(target, params)
    if len(src) < 2 or len(tgt) < 2:
        raise MatchingFailed("too few points to match")
    ns = estimate_normals(src.xyz, params.normal_k, params.viewpoint)
    nt = estimate_normals(tgt.xyz, params.normal_k, params.viewpoint)
    fs = compute_fpfh(src.xyz, ns, params.feature_k)
    ft = compute_fpfh(tgt.xyz, nt, params.feature_k)
    pairs = _mutual_nearest(fs, ft)
    if len(pairs) < 2:
        raise MatchingFailed(f"only {len(pairs)} mutual matches")
    return CorrespondenceSet(src.xyz[pairs[:, 0]], tgt.xyz[pairs[:, 1]])
