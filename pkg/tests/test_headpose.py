"""Tests for headpose: face model, reprojection and EPnP + LM pose recovery."""

import numpy as np
import pytest

from conftest import head_pose
from errors import ConfigError, PoseFailureError
from geomcore import rotation_angle_deg
from headpose import (
    FaceModel3D, LandmarkSet, estimate_head_pose, face_center, load_face_model, reproject,
)


def _landmarks(model, pose, cam, noise=None):
    pts = reproject(model, pose, cam)
    if noise is not None:
        pts = pts + noise
    return LandmarkSet(pts)


# ── Types ──

class TestFaceModel:

    def test_default_model_centroid(self, model):
        # x cancels by symmetry; y = (4 * 0 + 2 * 55) / 6; z = (8 + 0 + 0 + 8 + 5 + 5) / 6
        np.testing.assert_allclose(model.centroid, [0.0, 110.0 / 6.0, 26.0 / 6.0], atol=1e-12)

    def test_asymmetric_model_rejected(self, model):
        points = np.array(model.points)
        points[0, 0] -= 3.0
        with pytest.raises(ConfigError):
            FaceModel3D(points, model.eyeball_centers, model.eyeball_radius)

    def test_landmark_shape_checked(self):
        with pytest.raises(ConfigError):
            LandmarkSet(np.zeros((5, 2)))

    def test_load_face_model_overrides(self, tmp_path):
        path = tmp_path / 'face.txt'
        path.write_text("# wider eyes\neyeball_radius = 12.5\n"
                        "left_eyeball = -32 0 16\nright_eyeball = 32 0 16\n", encoding='utf-8')
        model = load_face_model(path)
        assert model.eyeball_radius == 12.5
        np.testing.assert_allclose(model.eyeball_centers, [[-32, 0, 16], [32, 0, 16]])


# ── face_center ──

class TestFaceCenter:

    def test_identity_rotation(self, model):
        pose = head_pose(translation=(10.0, -20.0, 600.0))
        np.testing.assert_allclose(face_center(pose, model),
                                   model.centroid + [10.0, -20.0, 600.0], atol=1e-12)

    def test_rotation_about_centroid(self, model):
        pose = head_pose(30.0, 10.0, 5.0, translation=(0, 0, 600))
        centred = head_pose(30.0, 10.0, 5.0,
                            translation=np.array([0, 0, 600]) - pose.rotation @ model.centroid)
        np.testing.assert_allclose(face_center(centred, model), [0, 0, 600], atol=1e-9)


# ── estimate_head_pose ──

class TestEstimateHeadPose:

    def test_frontal_exact(self, model, cam):
        pose = head_pose(translation=(0.0, 0.0, 650.0))
        est = estimate_head_pose(_landmarks(model, pose, cam), model, cam)
        assert rotation_angle_deg(est.pose.rotation, pose.rotation) < 0.1
        np.testing.assert_allclose(est.pose.translation, pose.translation, atol=1.0)
        assert est.reprojection_error < 1e-3

    def test_random_poses(self, model, cam):
        rng = np.random.default_rng(10)
        for _ in range(500):
            yaw = rng.uniform(-25, 25)
            pitch = rng.uniform(-10, 25)
            roll = rng.uniform(-10, 10)
            t = [rng.uniform(-150, 150), rng.uniform(-100, 100), rng.uniform(300, 1800)]
            pose = head_pose(yaw, pitch, roll, t)
            est = estimate_head_pose(_landmarks(model, pose, cam), model, cam)
            assert rotation_angle_deg(est.pose.rotation, pose.rotation) < 0.1
            assert np.linalg.norm(est.pose.translation - pose.translation) < 1.0

    def test_refinement_never_worse(self, model, cam):
        rng = np.random.default_rng(11)
        for _ in range(50):
            pose = head_pose(rng.uniform(-20, 20), rng.uniform(-10, 20), 0.0,
                             (0.0, 0.0, rng.uniform(400, 1200)))
            lm = _landmarks(model, pose, cam, rng.normal(0, 1.0, (6, 2)))
            est = estimate_head_pose(lm, model, cam)
            assert est.reprojection_error <= est.initial_error

    def test_noisy_landmarks_error_bound(self, model, cam):
        rng = np.random.default_rng(12)
        pose = head_pose(translation=(0.0, 0.0, 600.0))
        rot_err, fit_err = [], []
        for _ in range(100):
            lm = _landmarks(model, pose, cam, rng.normal(0, 1.0, (6, 2)))
            est = estimate_head_pose(lm, model, cam)
            rot_err.append(rotation_angle_deg(est.pose.rotation, pose.rotation))
            fit_err.append(est.reprojection_error)
        assert np.mean(rot_err) < 10.0
        assert np.mean(fit_err) < 1.5

    def test_garbage_landmarks_fail(self, model, cam):
        # mouth above the eyes and a collapsed eye line: no pose fits within the threshold
        lm = LandmarkSet([[900, 600], [960, 600], [961, 600], [1020, 600],
                          [700, 100], [1300, 900]])
        with pytest.raises(PoseFailureError):
            estimate_head_pose(lm, model, cam, failure_px=2.0)
