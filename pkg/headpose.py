"""
Head pose from six facial landmarks.

Fits a generic 3D face model (four eye corners, two mouth corners) to
detected 2D landmarks: EPnP gives the initial pose, then Levenberg-Marquardt
refines it on the reprojection error with the rotation updated through a
3-parameter local increment so it never leaves SO(3).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from config import DEFAULT_FACE_MODEL, LANDMARK_NAMES, get_setting
from errors import BehindCameraError, ConfigError, PoseFailureError
from geomcore import RigidTransform, nearest_rotation

log = logging.getLogger(__name__)

# Bilateral partner of each landmark across the head x = 0 plane
_MIRROR_INDEX = [3, 2, 1, 0, 5, 4]


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Six 2D landmarks (pixels) in LANDMARK_NAMES order, optional iris centres."""

    points: np.ndarray
    iris_centers: Optional[np.ndarray] = None
    timestamp: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (6, 2) or not np.all(np.isfinite(pts)):
            raise ConfigError(f"landmarks must be six finite 2D points, got shape {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, 'points', pts)
        if self.iris_centers is not None:
            iris = np.array(self.iris_centers, dtype=np.float64)
            if iris.shape != (2, 2) or not np.all(np.isfinite(iris)):
                raise ConfigError("iris centres must be two finite 2D points")
            iris.setflags(write=False)
            object.__setattr__(self, 'iris_centers', iris)
        object.__setattr__(self, 'timestamp', int(self.timestamp))

    @property
    def has_iris(self):
        return self.iris_centers is not None


@dataclass(frozen=True, eq=False)
class FaceModel3D:
    """Generic face model in the head frame (mm)."""

    points: np.ndarray
    eyeball_centers: np.ndarray
    eyeball_radius: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        eyes = np.array(self.eyeball_centers, dtype=np.float64)
        if pts.shape != (6, 3) or eyes.shape != (2, 3):
            raise ConfigError("face model needs six landmark points and two eyeball centres")
        if not self.eyeball_radius > 0:
            raise ConfigError("eyeball radius must be positive")

        flip = np.array([-1.0, 1.0, 1.0])
        if np.abs(pts[_MIRROR_INDEX] * flip - pts).max() > 1e-6:
            raise ConfigError("face model is not symmetric across x = 0")
        if np.abs(eyes[::-1] * flip - eyes).max() > 1e-6:
            raise ConfigError("eyeball centres are not symmetric across x = 0")

        s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if s[1] <= 1e-6 * s[0]:
            raise ConfigError("face model points are collinear")

        pts.setflags(write=False)
        eyes.setflags(write=False)
        object.__setattr__(self, 'points', pts)
        object.__setattr__(self, 'eyeball_centers', eyes)
        object.__setattr__(self, 'eyeball_radius', float(self.eyeball_radius))

    @property
    def centroid(self):
        return self.points.mean(axis=0)

    @classmethod
    def from_mapping(cls, values):
        """Build from name -> value(s); names are LANDMARK_NAMES plus eyeball keys."""
        try:
            points = [_triple(values[name]) for name in LANDMARK_NAMES]
            eyes = [_triple(values['left_eyeball']), _triple(values['right_eyeball'])]
            radius = float(np.ravel(values['eyeball_radius'])[0])
        except KeyError as e:
            raise ConfigError(f"face model is missing {e.args[0]}") from None
        return cls(points, eyes, radius)


def _triple(value):
    if isinstance(value, str):
        value = value.split()
    arr = np.asarray(value, dtype=np.float64).ravel()
    if arr.shape != (3,):
        raise ConfigError(f"expected three coordinates, got {value!r}")
    return arr


def default_face_model():
    return FaceModel3D.from_mapping(DEFAULT_FACE_MODEL)


def load_face_model(path):
    """Load a face model from a plain-text ``key = x y z`` file (mm)."""
    from formats import parse_key_values

    values = dict(DEFAULT_FACE_MODEL)
    values.update(parse_key_values(Path(path).read_text(encoding='utf-8'), path=path))
    model = FaceModel3D.from_mapping(values)
    log.info(f"Loaded face model from {path}")
    return model


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    """Head pose (head frame -> camera frame) with its fit quality."""

    pose: RigidTransform
    reprojection_error: float
    initial_error: float
    refined: bool


# ── Operations ──

def reproject(model, pose, cam):
    """Perspective projection of the six model points under a pose."""
    return cam.project(pose.apply(model.points))


def face_center(pose, model):
    """Centroid of the six model landmarks in the camera frame."""
    return pose.apply(model.points).mean(axis=0)


def _mean_reprojection_error(model, pose, cam, observed):
    try:
        projected = reproject(model, pose, cam)
    except BehindCameraError:
        return np.inf
    return float(np.linalg.norm(projected - observed, axis=1).mean())


def estimate_head_pose(lm, model, cam, max_iterations=None, failure_px=None):
    """Estimate the head pose from six landmarks (EPnP + LM refinement).

    Refinement is only kept when it lowers the reprojection error, so the
    returned error never exceeds the EPnP one.
    """
    max_iterations = max_iterations or get_setting('pose_max_iterations')
    failure_px = failure_px or get_setting('pose_failure_px')
    observed = lm.points

    ok, rvec, tvec = cv2.solvePnP(
        np.ascontiguousarray(model.points), np.ascontiguousarray(observed),
        cam.matrix, None, flags=cv2.SOLVEPNP_EPNP)
    if not ok:
        raise PoseFailureError("EPnP found no pose")
    r0 = nearest_rotation(cv2.Rodrigues(rvec)[0])
    t0 = np.asarray(tvec, dtype=np.float64).ravel()
    initial = RigidTransform(r0, t0)
    initial_error = _mean_reprojection_error(model, initial, cam, observed)

    def residuals(x):
        r = Rotation.from_rotvec(x[:3]).as_matrix() @ r0
        pts = model.points @ r.T + x[3:]
        z = np.maximum(pts[:, 2], 1e-6)
        proj = np.column_stack([cam.fx * pts[:, 0] / z + cam.cx,
                                cam.fy * pts[:, 1] / z + cam.cy])
        return (proj - observed).ravel()

    # LM with a finite-difference Jacobian spends (n + 1) evaluations per step
    fit = least_squares(residuals, np.concatenate([np.zeros(3), t0]), method='lm',
                        x_scale='jac', xtol=1e-10, ftol=1e-12,
                        max_nfev=max_iterations * 7)
    refined = RigidTransform.from_approx(
        Rotation.from_rotvec(fit.x[:3]).as_matrix() @ r0, fit.x[3:])
    refined_error = _mean_reprojection_error(model, refined, cam, observed)

    if refined_error <= initial_error:
        pose, error, used_refinement = refined, refined_error, True
    else:
        log.debug(f"refinement rejected ({refined_error:.4g} px > {initial_error:.4g} px)")
        pose, error, used_refinement = initial, initial_error, False

    if np.any(pose.apply(model.points)[:, 2] <= 0):
        raise PoseFailureError("solved pose puts landmarks behind the camera")
    if not error <= failure_px:
        raise PoseFailureError(
            f"reprojection error {error:.2f} px exceeds {failure_px:.2f} px "
            f"after {max_iterations} iterations")

    return PoseEstimate(pose, error, initial_error, used_refinement)
