import math

import numpy as np
import pytest

from lidarmap.errors import MalformedLine
from lidarmap.geometry import PointCloud, PointLabel, RigidPose, pose_apply
from lidarmap.synth import (
    BeamConfig,
    Box,
    CircleTrajectory,
    DynamicObject,
    GroundPlane,
    LineTrajectory,
    SceneSpec,
    SquareTrajectory,
    inject_reflected_noise,
    make_sequence,
    parse_scene,
    simulate_scan,
)

FLAT = SceneSpec(
    ground=[GroundPlane(np.array([0, 0, 1.0]), 0.0, (-100, 100, -100, 100))],
    bounds=(-100, 100, -100, 100),
)


def sensor_at(height=1.7):
    return RigidPose.identity().from_yaw(0.0, (0.0, 0.0, height))


class TestSimulateScan:
    def test_lowest_beam_hits_ground_at_trig_distance(self):
        beams = BeamConfig(channels=1, elevation_deg=(-24.8, -24.7), azimuth_steps=4,
                           max_range=80, range_noise_sigma=0.0)
        # single channel at exactly -24.8 deg
        beams = BeamConfig(channels=2, elevation_deg=(-24.8, 0.0), azimuth_steps=1,
                           max_range=80, range_noise_sigma=0.0)
        scan = simulate_scan(FLAT, sensor_at(1.7), 0.0, beams, seed=0)
        # only the -24.8 deg channel returns (the 0 deg one never reaches ground)
        assert len(scan) == 1
        expected_horizontal = 1.7 / math.tan(math.radians(24.8))
        assert scan.xyz[0, 0] == pytest.approx(expected_horizontal, abs=1e-9)
        assert expected_horizontal == pytest.approx(3.68, abs=0.01)
        assert scan.labels[0] == PointLabel.GROUND

    def test_upward_ray_no_return(self):
        beams = BeamConfig(channels=2, elevation_deg=(10.0, 20.0), azimuth_steps=8,
                           max_range=80, range_noise_sigma=0.0)
        scan = simulate_scan(FLAT, sensor_at(), 0.0, beams, seed=0)
        assert len(scan) == 0

    def test_box_occludes_ground(self):
        scene = SceneSpec(
            ground=list(FLAT.ground),
            static_objects=[Box(np.array([5.0, 0.0, 1.0]), np.array([1.0, 4.0, 2.0]))],
            bounds=FLAT.bounds,
        )
        beams = BeamConfig(channels=1, elevation_deg=(-10.0, -9.99), azimuth_steps=1,
                           max_range=80, range_noise_sigma=0.0)
        scan = simulate_scan(scene, sensor_at(1.7), 0.0, beams, seed=0)
        assert len(scan) == 1
        assert scan.labels[0] == PointLabel.STATIC_OBJECT
        # hit is on the near box face at x = 4.5, before the ground hit at ~9.6
        assert scan.xyz[0, 0] == pytest.approx(4.5, abs=1e-9)

    def test_noise_free_points_satisfy_plane_equation(self):
        beams = BeamConfig(channels=16, elevation_deg=(-24.8, -2.0), azimuth_steps=64,
                           max_range=80, range_noise_sigma=0.0)
        pose = RigidPose.from_yaw(0.7, (3.0, -2.0, 1.7))
        scan = simulate_scan(FLAT, pose, 0.0, beams, seed=0)
        world = pose_apply(pose, scan)
        ground = world.xyz[world.labels == PointLabel.GROUND]
        assert len(ground) > 100
        assert np.abs(ground[:, 2]).max() < 1e-9

    def test_determinism(self):
        beams = BeamConfig(channels=8, elevation_deg=(-20, 0), azimuth_steps=32)
        a = simulate_scan(FLAT, sensor_at(), 0.0, beams, seed=42)
        b = simulate_scan(FLAT, sensor_at(), 0.0, beams, seed=42)
        assert np.array_equal(a.xyz, b.xyz)
        assert np.array_equal(a.labels, b.labels)

    def test_label_soundness_by_reintersection(self):
        scene = SceneSpec(
            ground=list(FLAT.ground),
            static_objects=[Box(np.array([8.0, 2.0, 1.0]), np.array([2.0, 2.0, 2.0]), 0.4)],
            dynamic_objects=[
                DynamicObject(np.array([1.0, 1.0, 1.8]),
                              LineTrajectory(np.array([-6.0, -6.0, 0.9]), np.array([1.0, 0.0, 0.0])))
            ],
            bounds=FLAT.bounds,
        )
        beams = BeamConfig(channels=24, elevation_deg=(-24.8, 2.0), azimuth_steps=256,
                           max_range=80, range_noise_sigma=0.0)
        pose = sensor_at(1.7)
        scan = simulate_scan(scene, pose, 2.0, beams, seed=0)
        world = pose_apply(pose, scan)
        box = scene.static_objects[0]
        dyn = scene.dynamic_objects[0].box_at(2.0)
        for i in range(0, len(world), 97):
            p = world.xyz[i]
            lab = scan.labels[i]
            if lab == PointLabel.GROUND:
                assert abs(p[2]) < 1e-9
            else:
                target = box if lab == PointLabel.STATIC_OBJECT else dyn
                c, s = math.cos(target.yaw), math.sin(target.yaw)
                rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
                local = rot.T @ (p - target.center)
                assert np.all(np.abs(local) <= target.size / 2 + 1e-9)
                # on the surface, not inside
                assert np.any(np.abs(np.abs(local) - target.size / 2) < 1e-9)


class TestReflectedNoise:
    def _flat_scan(self):
        beams = BeamConfig(channels=40, elevation_deg=(-24.8, -2.0), azimuth_steps=512,
                           max_range=80, range_noise_sigma=0.0)
        return simulate_scan(FLAT, sensor_at(1.7), 0.0, beams, seed=1)

    def test_rate_zero_unchanged(self):
        scan = self._flat_scan()
        out = inject_reflected_noise(scan, 0.0, (0.3, 1.0), seed=0)
        assert len(out) == len(scan)

    def test_count_and_depth(self):
        scan = self._flat_scan()
        n_ground = int(np.sum(scan.labels == PointLabel.GROUND))
        out = inject_reflected_noise(scan, 0.01, (0.3, 1.0), seed=0)
        noise = out.labels == PointLabel.REFLECTED_NOISE
        assert int(noise.sum()) == round(0.01 * n_ground)
        # originals untouched, noise strictly below its source plane (z=0 here,
        # sensor frame ground sits at -1.7)
        assert np.array_equal(out.xyz[: len(scan)], scan.xyz)
        depths = -1.7 - out.xyz[noise, 2]
        assert np.all(depths >= 0.3 - 1e-12) and np.all(depths <= 1.0 + 1e-12)

    def test_no_ground_labels_unchanged(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)),
                           labels=np.full(10, PointLabel.STATIC_OBJECT, dtype=np.uint8))
        out = inject_reflected_noise(cloud, 0.5, (0.3, 1.0), seed=0)
        assert len(out) == 10


class TestMakeSequence:
    def test_single_scan_pose(self):
        traj = LineTrajectory(np.array([1.0, 2.0, 1.7]), np.array([1.0, 0.0, 0.0]))
        beams = BeamConfig(channels=4, elevation_deg=(-20, -5), azimuth_steps=16)
        scans, poses = make_sequence(FLAT, traj, beams, 1, seed=0)
        assert len(scans) == 1
        np.testing.assert_allclose(poses[0].translation, [1, 2, 1.7])

    def test_loop_closes(self):
        traj = CircleTrajectory((0, 0), 10.0, 1.7, 2 * math.pi / 20)
        p0 = traj.pose_at(0.0)
        p20 = traj.pose_at(20.0)
        assert np.linalg.norm(p0.translation - p20.translation) < 1e-9

    def test_dynamic_object_disjoint_over_time(self):
        scene = SceneSpec(
            ground=list(FLAT.ground),
            dynamic_objects=[
                DynamicObject(np.array([1.0, 1.0, 1.5]),
                              LineTrajectory(np.array([-10.0, 3.0, 0.75]), np.array([2.0, 0.0, 0.0])))
            ],
            bounds=FLAT.bounds,
        )
        beams = BeamConfig(channels=24, elevation_deg=(-24.8, 2.0), azimuth_steps=256,
                           max_range=80, range_noise_sigma=0.0)
        traj = LineTrajectory(np.array([0.0, 0.0, 1.7]), np.zeros(3))
        scans, poses = make_sequence(scene, traj, beams, 3, seed=0)
        centers = []
        for scan in scans:
            dyn = scan.xyz[scan.labels == PointLabel.DYNAMIC_OBJECT]
            assert len(dyn) > 0
            centers.append(dyn[:, :2].mean(axis=0))
        assert np.linalg.norm(centers[0] - centers[1]) > 1.0
        assert np.linalg.norm(centers[1] - centers[2]) > 1.0

    def test_sequence_determinism(self):
        beams = BeamConfig(channels=8, elevation_deg=(-20, 0), azimuth_steps=64)
        traj = LineTrajectory(np.array([0.0, 0.0, 1.7]), np.array([0.5, 0, 0]))
        s1, _ = make_sequence(FLAT, traj, beams, 3, seed=9)
        s2, _ = make_sequence(FLAT, traj, beams, 3, seed=9)
        for a, b in zip(s1, s2):
            assert np.array_equal(a.xyz, b.xyz)


class TestTrajectories:
    def test_square_walks_perimeter(self):
        traj = SquareTrajectory((0, 0), 5.0, 1.7, 1.0)
        p0 = traj.pose_at(0.0).translation
        p10 = traj.pose_at(10.0).translation
        p40 = traj.pose_at(40.0).translation
        np.testing.assert_allclose(p0, [-5, -5, 1.7])
        np.testing.assert_allclose(p10, [5, -5, 1.7])
        np.testing.assert_allclose(p0, p40, atol=1e-12)


class TestSceneParsing:
    def test_roundtrip_keys(self):
        text = """
        # demo scene
        bounds = -30 30 -30 30
        box = 10 5 1 2 2 2 0.3
        dynamic = 1 1 1.8 0 -10 0 0.9 1.2 0 0
        trajectory = circle 0 0 12 1.7 0.15
        beams = 32 -24.8 2.0 512 60 0.01
        scans = 5
        """
        cfg = parse_scene(text)
        assert cfg.n_scans == 5
        assert cfg.beams.channels == 32
        assert len(cfg.scene.static_objects) == 1
        assert len(cfg.scene.dynamic_objects) == 1
        assert len(cfg.scene.ground) == 1  # default flat ground added

    def test_unknown_key_rejected(self):
        with pytest.raises(MalformedLine):
            parse_scene("wheels = 4")

    def test_bad_arity_rejected(self):
        with pytest.raises(MalformedLine):
            parse_scene("box = 1 2 3")
