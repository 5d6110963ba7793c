"""
Data normalization.

Rotates and scales a virtual camera so it looks straight at the face centre
from a fixed distance, with its x-axis perpendicular to the head's y-axis.
This removes roll and distance from the input, leaving two degrees of
freedom of head pose. Gaze directions map between spaces by the rotation
alone; the scaling only applies to image points.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from config import get_setting
from errors import DegenerateGeometryError, InvalidVectorError
from geomcore import CameraIntrinsics

log = logging.getLogger(__name__)

GIMBAL_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class NormalizationParams:
    norm_distance: float
    norm_intrinsics: CameraIntrinsics
    patch_size: int

    def __post_init__(self):
        if not self.norm_distance > 0:
            raise DegenerateGeometryError("normalization distance must be positive")
        if not self.patch_size > 0:
            raise DegenerateGeometryError("patch size must be positive")


def default_normalization_params(overrides=None):
    """600 mm, 960 px focal length, 448 px square patch unless overridden."""
    size = get_setting('norm_patch_px', overrides)
    focal = get_setting('norm_focal_px', overrides)
    return NormalizationParams(
        norm_distance=get_setting('norm_distance_mm', overrides),
        norm_intrinsics=CameraIntrinsics(focal, focal, size / 2.0, size / 2.0, size, size),
        patch_size=size,
    )


@dataclass(frozen=True, eq=False)
class NormalizedFrame:
    rotation_n: np.ndarray
    scale: float
    warp: np.ndarray
    face_center_cam: np.ndarray
    patch_size: int
    patch: Optional[np.ndarray] = None
    gimbal_fallback: bool = False

    @property
    def warp_inverse(self):
        return np.linalg.inv(self.warp)


# ── Operations ──

def compute_normalization(face_center, head_pose, cam, params):
    """Build the normalizing rotation, scale and image warp for one frame."""
    face_center = np.asarray(face_center, dtype=np.float64)
    distance = np.linalg.norm(face_center)
    if distance < 1e-9:
        raise DegenerateGeometryError("face centre coincides with the camera centre")
    if face_center[2] <= 0:
        raise DegenerateGeometryError("face centre is behind the camera")

    z_axis = face_center / distance
    head_y = head_pose.rotation[:, 1]
    x_axis = np.cross(head_y, z_axis)
    fallback = False
    if np.linalg.norm(x_axis) < GIMBAL_TOL:
        log.debug("head y-axis parallel to the view ray; using the camera y-axis")
        x_axis = np.cross([0.0, 1.0, 0.0], z_axis)
        fallback = True
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    rotation = np.vstack([x_axis, y_axis, z_axis])

    scale = params.norm_distance / distance
    warp = (params.norm_intrinsics.matrix @ np.diag([1.0, 1.0, scale])
            @ rotation @ cam.inverse)

    for arr in (rotation, warp):
        arr.setflags(write=False)
    return NormalizedFrame(rotation, scale, warp, face_center.copy(),
                           params.patch_size, None, fallback)


def _apply_homography(h, p):
    x, y = np.asarray(p, dtype=np.float64)
    hx = h @ np.array([x, y, 1.0])
    if abs(hx[2]) < 1e-12:
        raise DegenerateGeometryError(f"point {p} maps to infinity")
    return hx[:2] / hx[2]


def warp_point(p, frame):
    """Original-image pixel -> normalized-patch pixel."""
    return _apply_homography(frame.warp, p)


def unwarp_point(p, frame):
    """Normalized-patch pixel -> original-image pixel."""
    return _apply_homography(frame.warp_inverse, p)


def warp_image(img, frame):
    """Resample the source image into the normalized patch (bilinear, zero fill)."""
    img = np.asarray(img)
    if img.size == 0:
        raise DegenerateGeometryError("cannot warp an empty image")
    cond = np.linalg.cond(frame.warp)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateGeometryError(f"warp is not invertible (condition {cond:.3g})")
    size = (frame.patch_size, frame.patch_size)
    return cv2.warpPerspective(img, np.array(frame.warp), size, flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def normalize_gaze(g, frame):
    """Camera-frame unit direction -> normalized space."""
    return frame.rotation_n @ _unit(g)


def denormalize_gaze(g_n, frame):
    """Normalized-space unit direction -> camera frame (rotation only)."""
    return frame.rotation_n.T @ _unit(g_n)


def normalize_head_rotation(head_pose, frame):
    """Head orientation as seen by the normalized camera."""
    return frame.rotation_n @ head_pose.rotation


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise InvalidVectorError(f"expected a unit 3-vector, got {v}")
    return v
