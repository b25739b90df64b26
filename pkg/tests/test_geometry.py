import math

import numpy as np
import pytest

from lidarmap.errors import DegenerateGeometry, TooFewPoints
from lidarmap.geometry import (
    PlaneModel,
    PointCloud,
    RigidPose,
    eig_sym3,
    fit_plane_pca,
    pose_apply,
    pose_compose,
    pose_exp,
    pose_inverse,
    pose_log,
    rotation_geodesic_error,
    voxel_downsample,
)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng, t_scale=5.0):
    return RigidPose(random_rotation(rng), rng.normal(scale=t_scale, size=3))


def plane_ssr(points, normal, offset):
    return float(np.sum((points @ normal + offset) ** 2))


def oracle_best_plane_ssr(points):
    """Independent least-squares oracle: optimal offset per normal, normal
    from numpy's iterative eigensolver on the covariance."""
    centroid = points.mean(axis=0)
    d = points - centroid
    cov = (d.T @ d) / len(points)
    vals, vecs = np.linalg.eigh(cov)
    n = vecs[:, 0]
    return plane_ssr(points, n, -float(n @ centroid))


def normal_grid(steps=60):
    """Coarse brute-force grid of unit normals over the +z hemisphere."""
    out = []
    for i in range(steps):
        theta = math.pi / 2 * i / (steps - 1)
        for j in range(2 * steps):
            phi = 2 * math.pi * j / (2 * steps)
            out.append(
                [
                    math.sin(theta) * math.cos(phi),
                    math.sin(theta) * math.sin(phi),
                    math.cos(theta),
                ]
            )
    return np.array(out)


class TestFitPlane:
    def test_coplanar_square(self):
        pts = np.array([(1, 0, 2), (0, 1, 2), (-1, 0, 2), (0, -1, 2)], dtype=float)
        plane = fit_plane_pca(pts)
        np.testing.assert_allclose(plane.normal, [0, 0, 1], atol=1e-12)
        assert plane.offset == pytest.approx(-2.0, abs=1e-12)

    def test_tilted_plane_matches_least_squares_oracle(self):
        rng = np.random.default_rng(7)
        n_true = np.array([1.0, 1.0, 1.0]) / math.sqrt(3)
        # points on x + y + z = 3 with tiny noise
        u = rng.uniform(-5, 5, size=(200, 2))
        pts = np.column_stack([u[:, 0], u[:, 1], 3.0 - u[:, 0] - u[:, 1]])
        pts += rng.normal(scale=1e-6, size=pts.shape)
        plane = fit_plane_pca(pts)
        assert np.allclose(plane.normal, n_true, atol=1e-5)
        assert plane.offset == pytest.approx(-math.sqrt(3), abs=1e-5)
        ours = plane_ssr(pts, plane.normal, plane.offset)
        assert ours <= oracle_best_plane_ssr(pts) + 1e-6

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            fit_plane_pca(np.array([(0, 0, 0), (1, 0, 0)], dtype=float))

    def test_collinear_points(self):
        pts = np.array([(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)], dtype=float)
        with pytest.raises(DegenerateGeometry):
            fit_plane_pca(pts)

    def test_beats_axis_aligned_grid_candidates(self):
        rng = np.random.default_rng(3)
        grid = normal_grid()
        for _ in range(5):
            pts = rng.normal(size=(40, 3)) * np.array([3.0, 2.0, 0.05])
            pts = pts @ random_rotation(rng).T + rng.normal(size=3)
            plane = fit_plane_pca(pts)
            ours = plane_ssr(pts, plane.normal, plane.offset)
            centroids = pts.mean(axis=0)
            for n in grid:
                cand = plane_ssr(pts, n, -float(n @ centroids))
                assert ours <= cand + 1e-6

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(50, 3)) * np.array([2.0, 2.0, 0.01])
        a = fit_plane_pca(pts)
        b = fit_plane_pca(pts[rng.permutation(50)])
        np.testing.assert_allclose(a.normal, b.normal, atol=1e-12)
        assert a.offset == pytest.approx(b.offset, abs=1e-12)

    def test_vertical_wall_has_horizontal_normal(self):
        rng = np.random.default_rng(5)
        y = rng.uniform(-2, 2, 100)
        z = rng.uniform(0, 2, 100)
        pts = np.column_stack([np.full(100, 4.0), y, z])
        plane = fit_plane_pca(pts)
        assert abs(plane.uprightness) < 1e-9
        assert plane.uprightness >= 0

    def test_flatness_reported(self):
        rng = np.random.default_rng(9)
        pts = rng.normal(size=(100, 3)) * np.array([1.0, 1.0, 0.01])
        plane = fit_plane_pca(pts)
        assert 0 < plane.flatness < 1e-3


class TestEigSym3:
    def test_matches_numpy_on_random_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            m = rng.normal(size=(3, 3))
            a = (m + m.T) / 2
            vals, vecs = eig_sym3(a)
            ref = np.linalg.eigvalsh(a)
            np.testing.assert_allclose(vals, ref, atol=1e-9 * max(1, np.abs(ref).max()))
            # residual check: A v = lambda v
            for k in range(3):
                res = a @ vecs[:, k] - vals[k] * vecs[:, k]
                assert np.linalg.norm(res) < 1e-7 * max(1, np.abs(ref).max())
            np.testing.assert_allclose(vecs.T @ vecs, np.eye(3), atol=1e-9)

    def test_repeated_eigenvalues(self):
        vals, vecs = eig_sym3(np.diag([2.0, 2.0, 2.0]))
        np.testing.assert_allclose(vals, [2, 2, 2])
        np.testing.assert_allclose(vecs, np.eye(3))

        a = np.diag([1.0, 1.0, 5.0])
        vals, vecs = eig_sym3(a)
        np.testing.assert_allclose(vals, [1, 1, 5], atol=1e-12)
        assert abs(vecs[2, 2]) == pytest.approx(1.0, abs=1e-12)

    def test_near_degenerate_pair(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            r = random_rotation(rng)
            a = r @ np.diag([1.0, 1.0 + 1e-9, 3.0]) @ r.T
            a = (a + a.T) / 2
            vals, vecs = eig_sym3(a)
            for k in range(3):
                res = a @ vecs[:, k] - vals[k] * vecs[:, k]
                assert np.linalg.norm(res) < 1e-6
            np.testing.assert_allclose(vecs.T @ vecs, np.eye(3), atol=1e-8)


class TestPoseOps:
    def test_compose_identity(self):
        rng = np.random.default_rng(1)
        t = random_pose(rng)
        out = pose_compose(t, RigidPose.identity())
        np.testing.assert_allclose(out.rotation, t.rotation, atol=1e-15)
        np.testing.assert_allclose(out.translation, t.translation, atol=1e-15)

    def test_inverse_composes_to_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            t = random_pose(rng)
            out = pose_compose(pose_inverse(t), t)
            np.testing.assert_allclose(out.rotation, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(out.translation, np.zeros(3), atol=1e-12)

    def test_log_of_yaw_rotation(self):
        t = RigidPose.from_yaw(math.pi / 2)
        xi = pose_log(t)
        np.testing.assert_allclose(xi[:3], [0, 0, math.pi / 2], atol=1e-12)
        np.testing.assert_allclose(xi[3:], np.zeros(3), atol=1e-12)

    def test_log_exp_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            t = random_pose(rng)
            back = pose_exp(pose_log(t))
            np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-9)
            np.testing.assert_allclose(back.translation, t.translation, atol=1e-9)

    def test_exp_log_roundtrip_inside_ball(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            omega = rng.normal(size=3)
            omega *= rng.uniform(0, math.pi * 0.95) / np.linalg.norm(omega)
            xi = np.concatenate([omega, rng.normal(scale=3, size=3)])
            np.testing.assert_allclose(pose_log(pose_exp(xi)), xi, atol=1e-9)

    def test_apply_compose_associativity(self):
        rng = np.random.default_rng(5)
        cloud = PointCloud(rng.normal(size=(30, 3)))
        a, b = random_pose(rng), random_pose(rng)
        lhs = pose_apply(pose_compose(a, b), cloud)
        rhs = pose_apply(a, pose_apply(b, cloud))
        np.testing.assert_allclose(lhs.xyz, rhs.xyz, atol=1e-9)

    def test_rotation_validation(self):
        with pytest.raises(ValueError):
            RigidPose(np.eye(3) * 1.001, np.zeros(3))
        with pytest.raises(ValueError):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


class TestGeodesicError:
    def test_identity(self):
        assert rotation_geodesic_error(np.eye(3), np.eye(3)) == 0.0

    def test_yaw_90(self):
        r = RigidPose.from_yaw(math.pi / 2).rotation
        assert rotation_geodesic_error(np.eye(3), r) == pytest.approx(90.0, abs=1e-9)

    def test_yaw_10_vs_40(self):
        a = RigidPose.from_yaw(math.radians(10)).rotation
        b = RigidPose.from_yaw(math.radians(40)).rotation
        assert rotation_geodesic_error(a, b) == pytest.approx(30.0, abs=1e-9)


class TestPointCloud:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, 0.0, np.nan]]))

    def test_select_preserves_labels(self):
        cloud = PointCloud(
            np.arange(9, dtype=float).reshape(3, 3), labels=np.array([1, 2, 3])
        )
        sub = cloud.select(np.array([2, 0]))
        assert list(sub.labels) == [3, 1]

    def test_plane_model_requires_unit_normal(self):
        with pytest.raises(ValueError):
            PlaneModel(np.array([0.0, 0.0, 2.0]), 0.0)


class TestVoxelDownsample:
    def test_centroid_per_voxel(self):
        cloud = PointCloud(
            np.array([[0.1, 0.1, 0.1], [0.3, 0.3, 0.3], [1.2, 0.0, 0.0]])
        )
        out = voxel_downsample(cloud, 0.5)
        assert len(out) == 2
        np.testing.assert_allclose(out.xyz[0], [0.2, 0.2, 0.2])

    def test_duplicate_cloud_dedups(self):
        rng = np.random.default_rng(6)
        xyz = rng.uniform(-5, 5, size=(500, 3))
        single = voxel_downsample(PointCloud(xyz), 0.2)
        doubled = voxel_downsample(PointCloud(np.vstack([xyz, xyz])), 0.2)
        assert len(single) == len(doubled)

    def test_majority_label(self):
        cloud = PointCloud(
            np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.3, 0.3, 0.3]]),
            labels=np.array([1, 1, 2]),
        )
        out = voxel_downsample(cloud, 1.0)
        assert out.labels[0] == 1
