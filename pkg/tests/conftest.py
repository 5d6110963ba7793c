"""Shared fixtures: the default camera, face model and a 750 mm scene."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from geomcore import RigidTransform, ScreenModel, default_intrinsics
from headpose import default_face_model
from synthlab import screen_for_distance


@pytest.fixture
def cam():
    return default_intrinsics()


@pytest.fixture
def model():
    return default_face_model()


@pytest.fixture
def screen():
    return screen_for_distance(750.0)


@pytest.fixture
def flat_screen():
    """500 x 300 mm, 1000 x 600 px, lying on the camera's z = 0 plane."""
    return ScreenModel(RigidTransform.identity(), 500.0, 300.0, 1000, 600)


def head_pose(yaw=0.0, pitch=0.0, roll=0.0, translation=(0.0, 0.0, 600.0)):
    """Head pose from yaw/pitch/roll in degrees; identity faces the camera."""
    r = Rotation.from_euler('yxz', [yaw, pitch, roll], degrees=True).as_matrix()
    return RigidTransform(r, translation)


def random_unit(rng, n=None):
    v = rng.standard_normal((n, 3) if n else 3)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
