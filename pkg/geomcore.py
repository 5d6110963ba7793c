"""
Core geometry for the gaze geometry lab.

Coordinate frames, the pinhole camera, gaze rays, the screen plane and the
angular error metric. Units are millimetres and degrees; timestamps are
integer microseconds. The camera frame is x right, y down, z forward. The
screen frame is x right, y down, z out of the screen, with the display
surface on z = 0 and the origin at the top-left pixel corner.

Everything here is a pure function of immutable values.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from config import get_setting
from errors import (
    BehindCameraError, ConfigError, DegenerateRayError, InvalidVectorError,
    NoIntersectionError,
)

log = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
UNIT_TOL = 1e-9


def _frozen_array(values, shape, name):
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise ConfigError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


def normalize(v):
    """Return v / ||v||; raises InvalidVectorError on zero or non-finite input."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < 1e-300:
        raise InvalidVectorError(f"cannot normalize vector {v}")
    return v / n


def nearest_rotation(m):
    """Project a 3x3 matrix onto SO(3) (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle_deg(ra, rb):
    """Angle of the relative rotation ra^T rb, in degrees."""
    rel = np.asarray(ra).T @ np.asarray(rb)
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


# ── Domain types ──

@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    """Pinhole projection parameters in pixels (no lens distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx <= self.width_px and 0 <= self.cy <= self.height_px):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside sensor "
                f"{self.width_px}x{self.height_px}")

    @property
    def matrix(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def inverse(self):
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def project(self, points):
        """Project camera-frame points (N,3) or (3,) to pixels."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        z = pts[:, 2]
        if np.any(z <= 0):
            raise BehindCameraError(f"cannot project point with depth {z.min():.3f} mm")
        px = np.column_stack([
            self.fx * pts[:, 0] / z + self.cx,
            self.fy * pts[:, 1] / z + self.cy,
        ])
        return px[0] if single else px

    def pixel_ray(self, px):
        """Unit direction of the camera ray through a pixel."""
        u, v = np.asarray(px, dtype=np.float64)
        return normalize([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])

    def to_dict(self):
        return {
            'fx': float(self.fx), 'fy': float(self.fy),
            'cx': float(self.cx), 'cy': float(self.cy),
            'width_px': int(self.width_px), 'height_px': int(self.height_px),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d['fx']), float(d['fy']), float(d['cx']), float(d['cy']),
                   int(d['width_px']), int(d['height_px']))


def default_intrinsics(overrides=None):
    """Camera intrinsics from settings (1080p webcam class by default)."""
    return CameraIntrinsics(
        fx=get_setting('camera_fx', overrides),
        fy=get_setting('camera_fy', overrides),
        cx=get_setting('camera_cx', overrides),
        cy=get_setting('camera_cy', overrides),
        width_px=get_setting('camera_width_px', overrides),
        height_px=get_setting('camera_height_px', overrides),
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation (mm) mapping points from a source frame into a target frame.

    det(rotation) is +1, or -1 when ``mirrored`` is set (the pose of a
    reflection as seen through a mirror).
    """

    rotation: np.ndarray
    translation: np.ndarray
    mirrored: bool = False

    def __post_init__(self):
        r = _frozen_array(self.rotation, (3, 3), 'rotation')
        t = _frozen_array(self.translation, (3,), 'translation')
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ConfigError("rotation is not orthonormal")
        expected = -1.0 if self.mirrored else 1.0
        if abs(np.linalg.det(r) - expected) > ORTHONORMAL_TOL:
            raise ConfigError(f"rotation determinant must be {expected:+.0f}")
        object.__setattr__(self, 'rotation', r)
        object.__setattr__(self, 'translation', t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation):
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    @classmethod
    def from_approx(cls, rotation, translation):
        """Build from a nearly-orthonormal rotation by projecting it onto SO(3)."""
        return cls(nearest_rotation(rotation), translation)

    @property
    def rotvec(self):
        if self.mirrored:
            raise ConfigError("a mirrored transform has no rotation vector")
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def apply(self, points):
        """Map (N,3) or (3,) points from the source frame into the target frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def apply_direction(self, v):
        return np.asarray(v, dtype=np.float64) @ self.rotation.T

    def inverse(self):
        r_inv = self.rotation.T
        return RigidTransform(r_inv, -(r_inv @ self.translation), self.mirrored)

    def compose(self, other):
        """self ∘ other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
            self.mirrored != other.mirrored,
        )

    def to_dict(self):
        return {
            'rotation': self.rotation.tolist(),
            'translation': self.translation.tolist(),
            'mirrored': bool(self.mirrored),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d['rotation'], d['translation'], bool(d.get('mirrored', False)))


@dataclass(frozen=True, eq=False)
class GazeSample:
    """A gaze ray in the camera frame: origin (mm), unit direction, timestamp (µs)."""

    origin: np.ndarray
    direction: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64)
        d = np.array(self.direction, dtype=np.float64)
        if o.shape != (3,) or not np.all(np.isfinite(o)):
            raise InvalidVectorError(f"gaze origin must be a finite 3-vector, got {o}")
        if d.shape != (3,) or not np.all(np.isfinite(d)):
            raise InvalidVectorError(f"gaze direction must be a finite 3-vector, got {d}")
        if abs(np.linalg.norm(d) - 1.0) > UNIT_TOL:
            raise InvalidVectorError(f"gaze direction must be unit, norm is {np.linalg.norm(d)}")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, 'origin', o)
        object.__setattr__(self, 'direction', d)
        object.__setattr__(self, 'timestamp', int(self.timestamp))


@dataclass(frozen=True)
class ScreenGeometry:
    """Physical size and resolution of a display."""

    width_mm: float
    height_mm: float
    width_px: int
    height_px: int

    def __post_init__(self):
        if min(self.width_mm, self.height_mm, self.width_px, self.height_px) <= 0:
            raise ConfigError("screen dimensions must be positive")

    @property
    def mm_per_px(self):
        return np.array([self.width_mm / self.width_px, self.height_mm / self.height_px])

    def px_to_mm(self, px):
        """Screen pixels (N,2)/(2,) to screen-plane mm, z = 0 appended."""
        px = np.asarray(px, dtype=np.float64)
        mm = px * self.mm_per_px
        return np.concatenate([mm, np.zeros(mm.shape[:-1] + (1,))], axis=-1)

    def contains(self, px):
        x, y = np.asarray(px, dtype=np.float64)
        return bool(0 <= x <= self.width_px and 0 <= y <= self.height_px)

    def at(self, pose):
        return ScreenModel(pose, self.width_mm, self.height_mm, self.width_px, self.height_px)


@dataclass(frozen=True, eq=False)
class ScreenModel:
    """Screen pose (screen frame -> camera frame) plus physical size and resolution."""

    pose: RigidTransform
    width_mm: float
    height_mm: float
    width_px: int
    height_px: int

    def __post_init__(self):
        # validates the dimensions
        ScreenGeometry(self.width_mm, self.height_mm, self.width_px, self.height_px)

    @property
    def geometry(self):
        return ScreenGeometry(self.width_mm, self.height_mm, self.width_px, self.height_px)

    @property
    def mm_per_px(self):
        return self.geometry.mm_per_px

    @property
    def normal(self):
        return self.pose.rotation[:, 2]

    @property
    def center_px(self):
        return np.array([self.width_px / 2.0, self.height_px / 2.0])

    def to_dict(self):
        return {
            'pose': self.pose.to_dict(),
            'width_mm': float(self.width_mm), 'height_mm': float(self.height_mm),
            'width_px': int(self.width_px), 'height_px': int(self.height_px),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(RigidTransform.from_dict(d['pose']), float(d['width_mm']),
                   float(d['height_mm']), int(d['width_px']), int(d['height_px']))


@dataclass(frozen=True, eq=False)
class MirrorPlane:
    """A planar mirror: any point on it plus its unit normal (camera frame)."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        p = _frozen_array(self.point, (3,), 'mirror point')
        n = np.array(self.normal, dtype=np.float64)
        if n.shape != (3,) or np.linalg.norm(n) < 1e-12:
            raise InvalidVectorError("mirror normal must be a non-zero 3-vector")
        n = n / np.linalg.norm(n)
        n.setflags(write=False)
        object.__setattr__(self, 'point', p)
        object.__setattr__(self, 'normal', n)

    @property
    def distance(self):
        """Signed distance of the plane from the camera centre along the normal."""
        return float(self.normal @ self.point)

    @property
    def householder(self):
        return np.eye(3) - 2.0 * np.outer(self.normal, self.normal)


def reflect_pose(pose, plane):
    """Reflect a pose through a mirror plane: x' = H x + 2 d n."""
    h = plane.householder
    return RigidTransform(
        h @ pose.rotation,
        h @ pose.translation + 2.0 * plane.distance * plane.normal,
        not pose.mirrored,
    )


class CameraPoint(NamedTuple):
    xyz: np.ndarray
    in_bounds: bool


class ScreenPoint(NamedTuple):
    px: np.ndarray
    in_bounds: bool


# ── Operations ──

def angular_error(a, b):
    """Angle between two directions in degrees, in [0, 180]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0 or not (np.isfinite(na) and np.isfinite(nb)):
        raise InvalidVectorError("angular error needs two non-zero finite vectors")
    a, b = a / na, b / nb
    # atan2 form of arccos(a.b); stays exact at 0 and 180 degrees
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.clip(a @ b, -1.0, 1.0))))


def screen_px_to_camera_3d(p, screen):
    """Lift a screen pixel onto the screen plane in the camera frame (mm)."""
    p = np.asarray(p, dtype=np.float64)
    in_bounds = screen.geometry.contains(p)
    if not in_bounds:
        log.debug(f"screen pixel {p} outside {screen.width_px}x{screen.height_px}")
    xyz = screen.pose.apply(screen.geometry.px_to_mm(p))
    return CameraPoint(xyz, in_bounds)


def gaze_from_target(face_center, target, timestamp=0):
    """Gaze ray from the face centre towards a 3D target."""
    face_center = np.asarray(face_center, dtype=np.float64)
    delta = np.asarray(target, dtype=np.float64) - face_center
    if np.linalg.norm(delta) < 1e-12:
        raise DegenerateRayError("gaze origin and target coincide")
    return GazeSample(face_center, delta / np.linalg.norm(delta), timestamp)


def intersect_ray_screen(g, screen):
    """Point of regard of a gaze ray on the screen, in screen pixels (not clipped)."""
    n = screen.normal
    denom = float(n @ g.direction)
    if abs(denom) < 1e-12:
        raise NoIntersectionError("gaze ray is parallel to the screen plane")
    t = float(n @ (screen.pose.translation - g.origin)) / denom
    if t <= 0:
        raise BehindCameraError(f"screen plane lies behind the ray origin (t = {t:.3f})")
    hit = g.origin + t * g.direction
    local = screen.pose.rotation.T @ (hit - screen.pose.translation)
    px = local[:2] / screen.mm_per_px
    return ScreenPoint(px, screen.geometry.contains(px))


def midpoint_gaze_point(left, right, screen):
    """Mean of the two per-eye screen intersections."""
    pl = intersect_ray_screen(left, screen).px
    pr = intersect_ray_screen(right, screen).px
    mid = (pl + pr) / 2.0
    return ScreenPoint(mid, screen.geometry.contains(mid))
