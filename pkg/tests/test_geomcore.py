"""Tests for geomcore: frames, camera, rays, screen plane and angular error.

Expected values are computed by hand where the geometry allows it:
    screen pixel p  ->  pose.apply([p_x * w_mm / w_px, p_y * h_mm / h_px, 0])
    ray o + t d hits the plane n.(x - T) = 0 at t = n.(T - o) / n.d
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import random_unit
from errors import (
    BehindCameraError, ConfigError, DegenerateRayError, InvalidVectorError, NoIntersectionError,
)
from geomcore import (
    CameraIntrinsics, GazeSample, MirrorPlane, RigidTransform, ScreenModel, angular_error,
    gaze_from_target, intersect_ray_screen, midpoint_gaze_point, nearest_rotation,
    reflect_pose, screen_px_to_camera_3d,
)


def _random_screen(rng):
    rotation = Rotation.from_rotvec(rng.uniform(-0.3, 0.3, 3)).as_matrix()
    return ScreenModel(RigidTransform(rotation, rng.uniform(-200, 200, 3)),
                       520.0, 320.0, 1920, 1200)


# ── angular_error ──

class TestAngularError:

    def test_identical(self):
        assert angular_error([0, 0, 1], [0, 0, 1]) == 0.0

    def test_orthogonal(self):
        assert angular_error([0, 0, 1], [0, 1, 0]) == pytest.approx(90.0, abs=1e-12)

    def test_five_degrees(self):
        b = np.array([0.0, np.tan(np.radians(5.0)), 1.0])
        assert angular_error([0, 0, 1], b / np.linalg.norm(b)) == pytest.approx(5.0, abs=1e-9)

    def test_scale_invariant(self):
        assert angular_error([0, 0, 3], [0, 2, 0]) == pytest.approx(90.0, abs=1e-12)

    def test_zero_vector_raises(self):
        with pytest.raises(InvalidVectorError):
            angular_error([0, 0, 0], [0, 0, 1])

    def test_symmetry_and_extremes(self):
        rng = np.random.default_rng(0)
        a = random_unit(rng, 1000)
        b = random_unit(rng, 1000)
        for u, v in zip(a, b):
            assert angular_error(u, v) == angular_error(v, u)
            assert angular_error(u, u) == 0.0
            assert angular_error(u, -u) == pytest.approx(180.0, abs=1e-9)
            assert 0.0 <= angular_error(u, v) <= 180.0

    def test_rotation_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            u, v = random_unit(rng), random_unit(rng)
            r = Rotation.random(random_state=int(rng.integers(1 << 31)))
            assert angular_error(r.apply(u), r.apply(v)) == pytest.approx(
                angular_error(u, v), abs=1e-9)


# ── screen_px_to_camera_3d ──

class TestScreenPxToCamera:

    def test_origin(self, flat_screen):
        p = screen_px_to_camera_3d([0, 0], flat_screen)
        np.testing.assert_allclose(p.xyz, [0, 0, 0], atol=1e-12)
        assert p.in_bounds

    def test_far_corner(self, flat_screen):
        p = screen_px_to_camera_3d([1000, 600], flat_screen)
        np.testing.assert_allclose(p.xyz, [500, 300, 0], atol=1e-12)

    def test_translated_screen(self):
        screen = ScreenModel(RigidTransform(np.eye(3), [0, 0, 500]), 500.0, 300.0, 1000, 600)
        p = screen_px_to_camera_3d([500, 300], screen)
        np.testing.assert_allclose(p.xyz, [250, 150, 500], atol=1e-12)

    def test_out_of_bounds_flagged_not_clipped(self, flat_screen):
        p = screen_px_to_camera_3d([-100, 700], flat_screen)
        np.testing.assert_allclose(p.xyz, [-50, 350, 0], atol=1e-12)
        assert not p.in_bounds


# ── gaze_from_target ──

class TestGazeFromTarget:

    def test_axial(self):
        g = gaze_from_target([0, 0, 600], [0, 0, 0])
        np.testing.assert_allclose(g.direction, [0, 0, -1], atol=1e-15)
        np.testing.assert_allclose(g.origin, [0, 0, 600])

    def test_diagonal(self):
        g = gaze_from_target([0, 0, 600], [600, 0, 0])
        np.testing.assert_allclose(g.direction, [np.sqrt(0.5), 0, -np.sqrt(0.5)], atol=1e-15)

    def test_coincident_raises(self):
        with pytest.raises(DegenerateRayError):
            gaze_from_target([1, 2, 3], [1, 2, 3])


# ── intersect_ray_screen ──

class TestIntersectRayScreen:

    def test_axial(self, flat_screen):
        hit = intersect_ray_screen(GazeSample([0, 0, 600], [0, 0, -1]), flat_screen)
        np.testing.assert_allclose(hit.px, [0, 0], atol=1e-12)

    def test_parallel_raises(self, flat_screen):
        with pytest.raises(NoIntersectionError):
            intersect_ray_screen(GazeSample([0, 0, 600], [1, 0, 0]), flat_screen)

    def test_behind_raises(self, flat_screen):
        with pytest.raises(BehindCameraError):
            intersect_ray_screen(GazeSample([0, 0, 600], [0, 0, 1]), flat_screen)

    def test_off_screen_returned_unclipped(self, flat_screen):
        g = gaze_from_target([0, 0, 600], [-100, -50, 0])
        hit = intersect_ray_screen(g, flat_screen)
        np.testing.assert_allclose(hit.px, [-200, -100], atol=1e-9)
        assert not hit.in_bounds

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            screen = _random_screen(rng)
            p = rng.uniform([0, 0], [1920, 1200])
            target = screen_px_to_camera_3d(p, screen).xyz
            c = target + rng.uniform(100, 900) * screen.normal + rng.uniform(-300, 300, 3)
            if abs(screen.normal @ (c - screen.pose.translation)) < 1.0:
                continue
            hit = intersect_ray_screen(gaze_from_target(c, target), screen)
            np.testing.assert_allclose(hit.px, p, atol=1e-6)


# ── midpoint_gaze_point ──

class TestMidpointGazePoint:

    def test_identical_rays(self, flat_screen):
        g = gaze_from_target([100, 50, 600], [200, 100, 0])
        mid = midpoint_gaze_point(g, g, flat_screen)
        np.testing.assert_allclose(mid.px, intersect_ray_screen(g, flat_screen).px, atol=1e-12)

    def test_midpoint_of_hits(self, flat_screen):
        left = gaze_from_target([-30, 0, 600], [50, 50, 0])      # (100, 100) px
        right = gaze_from_target([30, 0, 600], [100, 100, 0])    # (200, 200) px
        np.testing.assert_allclose(midpoint_gaze_point(left, right, flat_screen).px,
                                   [150, 150], atol=1e-9)

    def test_vergence_target(self, screen):
        target_px = np.array([812.5, 401.25])
        target = screen_px_to_camera_3d(target_px, screen).xyz
        left = gaze_from_target([-30, 0, 750], target)
        right = gaze_from_target([30, 0, 750], target)
        np.testing.assert_allclose(midpoint_gaze_point(left, right, screen).px,
                                   target_px, atol=1e-6)

    def test_missing_eye_propagates(self, flat_screen):
        good = gaze_from_target([0, 0, 600], [10, 10, 0])
        parallel = GazeSample([0, 0, 600], [0, 1, 0])
        with pytest.raises(NoIntersectionError):
            midpoint_gaze_point(good, parallel, flat_screen)


# ── Types ──

class TestTypes:

    def test_intrinsics_validation(self):
        with pytest.raises(ConfigError):
            CameraIntrinsics(0.0, 1000.0, 320, 240, 640, 480)
        with pytest.raises(ConfigError):
            CameraIntrinsics(1000.0, 1000.0, 700, 240, 640, 480)

    def test_project_and_pixel_ray(self, cam):
        point = np.array([70.0, -35.0, 700.0])
        px = cam.project(point)
        np.testing.assert_allclose(px, [960 + 1400 * 0.1, 540 - 1400 * 0.05], atol=1e-9)
        np.testing.assert_allclose(cam.pixel_ray(px), point / np.linalg.norm(point), atol=1e-12)

    def test_project_behind_raises(self, cam):
        with pytest.raises(BehindCameraError):
            cam.project([0, 0, -1])

    def test_rigid_transform_rejects_non_rotation(self):
        with pytest.raises(ConfigError):
            RigidTransform(np.diag([1.0, 1.0, 2.0]), np.zeros(3))
        with pytest.raises(ConfigError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_inverse_compose(self):
        rng = np.random.default_rng(3)
        pose = RigidTransform.from_rotvec(rng.uniform(-1, 1, 3), rng.uniform(-500, 500, 3))
        ident = pose.compose(pose.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(ident.translation, np.zeros(3), atol=1e-9)

    def test_nearest_rotation(self):
        noisy = np.eye(3) + 1e-4 * np.random.default_rng(4).standard_normal((3, 3))
        r = nearest_rotation(noisy)
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    def test_gaze_sample_requires_unit_direction(self):
        with pytest.raises(InvalidVectorError):
            GazeSample([0, 0, 0], [0, 0, 2])

    def test_reflection_is_an_involution(self):
        rng = np.random.default_rng(5)
        pose = RigidTransform.from_rotvec(rng.uniform(-0.5, 0.5, 3), [-250, 10, 0])
        plane = MirrorPlane([0, 0, 400], random_unit(rng) + [0, 0, -3])
        once = reflect_pose(pose, plane)
        twice = reflect_pose(once, plane)
        assert once.mirrored and not twice.mirrored
        assert np.linalg.det(once.rotation) == pytest.approx(-1.0, abs=1e-12)
        np.testing.assert_allclose(twice.rotation, pose.rotation, atol=1e-12)
        np.testing.assert_allclose(twice.translation, pose.translation, atol=1e-12)

    def test_axis_aligned_reflection(self):
        plane = MirrorPlane([0, 0, 400], [0, 0, -1])
        reflected = reflect_pose(RigidTransform(np.eye(3), [10, 20, 100]), plane)
        np.testing.assert_allclose(reflected.translation, [10, 20, 700], atol=1e-12)
        np.testing.assert_allclose(reflected.rotation, np.diag([1.0, 1.0, -1.0]), atol=1e-12)
