"""
Calibration: personal (per-user) correction and camera-screen extrinsics.

Personal calibration fits a polynomial of up to third order from estimated
to true on-screen gaze points. Pixel coordinates are scaled to [-1, 1] with
the screen bounds before the ten monomials are built. The order is picked by
leave-one-out residual, so a handful of noisy samples is never interpolated
by a cubic; with three samples or fewer no order can be validated and the
minimum-norm cubic is used.

Screen calibration recovers the pose of a screen the camera cannot see from
views of an on-screen pattern reflected in a planar mirror held at several
orientations. Each view gives the pose of the virtual (reflected) pattern;
the real screen pose and the mirror planes are then solved linearly from the
reflection constraints and refined jointly on the corner reprojection error.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from itertools import combinations
from typing import NamedTuple

import cv2
import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from config import get_setting
from errors import (
    ConfigError, DegenerateGeometryError, IllConditionedError, InsufficientDataError,
)
from geomcore import RigidTransform, ScreenGeometry, nearest_rotation

log = logging.getLogger(__name__)

N_TERMS = 10
RCOND = 1e-10

# Leading terms of the cubic basis for each polynomial order
MODEL_TERMS = (3, 6, 10)
MODEL_NAMES = {3: 'affine', 6: 'quadratic', 10: 'cubic'}
LOO_GAIN = 0.8
LEVERAGE_TOL = 1e-9
FLIP_Y = np.diag([1.0, -1.0, 1.0])


# ── Personal calibration ──

def monomials(uv):
    """Cubic basis [1, x, y, x², xy, y², x³, x²y, xy², y³] for (N, 2) points."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    u, v = uv[:, 0], uv[:, 1]
    return np.column_stack([
        np.ones_like(u), u, v,
        u * u, u * v, v * v,
        u * u * u, u * u * v, u * v * v, v * v * v,
    ])


def _to_unit_square(px, size):
    return 2.0 * np.asarray(px, dtype=np.float64) / size - 1.0


def _from_unit_square(uv, size):
    return (np.asarray(uv, dtype=np.float64) + 1.0) * size / 2.0


def _correct(coeffs, size, points):
    basis = monomials(_to_unit_square(points, size))
    uv = np.column_stack([(basis * coeffs[0]).sum(axis=1),
                          (basis * coeffs[1]).sum(axis=1)])
    return _from_unit_square(uv, size)


@dataclass(frozen=True, eq=False)
class CalibrationProfile:
    """Per-user cubic correction in normalized screen coordinates."""

    coeffs: np.ndarray
    n_samples: int
    rms_residual: float
    created_at: str
    screen_size: tuple
    input_min: np.ndarray
    input_max: np.ndarray
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=np.float64)
        if coeffs.shape != (2, N_TERMS):
            raise ConfigError(f"profile needs 2x{N_TERMS} coefficients, got {coeffs.shape}")
        if self.n_samples < 0 or not self.rms_residual >= 0:
            raise ConfigError("profile sample count and residual must be non-negative")
        coeffs.setflags(write=False)
        object.__setattr__(self, 'coeffs', coeffs)
        object.__setattr__(self, 'screen_size',
                           (int(self.screen_size[0]), int(self.screen_size[1])))
        object.__setattr__(self, 'input_min', np.array(self.input_min, dtype=np.float64))
        object.__setattr__(self, 'input_max', np.array(self.input_max, dtype=np.float64))

    @property
    def size(self):
        return np.array(self.screen_size, dtype=np.float64)


class Correction(NamedTuple):
    point: np.ndarray
    extrapolated: bool


def _now():
    return datetime.now(timezone.utc).isoformat()


def identity_profile(screen, created_at=None):
    """The calibration-free profile: maps every point to itself."""
    coeffs = np.zeros((2, N_TERMS))
    coeffs[0, 1] = 1.0
    coeffs[1, 2] = 1.0
    return CalibrationProfile(
        coeffs, 0, 0.0, created_at or _now(), (screen.width_px, screen.height_px),
        [0.0, 0.0], [float(screen.width_px), float(screen.height_px)])


def _loo_residual(basis, target):
    """Leave-one-out (PRESS) residual of a least-squares fit; inf if a point has leverage 1."""
    hat = basis @ np.linalg.pinv(basis, rcond=RCOND)
    leverage = np.diag(hat)
    if np.any(leverage > 1.0 - LEVERAGE_TOL):
        return np.inf
    residual = (target - hat @ target) / (1.0 - leverage)[:, None]
    return float(np.sum(residual ** 2))


def _select_terms(basis, target):
    """Number of leading basis terms to fit, or None when no order can be validated.

    Orders are tried from affine up. An order is only a candidate when every
    leave-one-out fold is overdetermined, and replaces a lower one only if it
    cuts the leave-one-out residual by more than LOO_GAIN.
    """
    n = len(basis)
    terms, best = None, np.inf
    for k in MODEL_TERMS:
        if n <= k:
            break
        press = _loo_residual(basis[:, :k], target)
        if terms is None or press < LOO_GAIN * best:
            terms, best = k, press
    return terms


def fit_personal_calibration(pairs, screen, created_at=None):
    """Fit the polynomial map from (estimated px, true px) pairs.

    ``pairs`` is a sequence of (estimated, true) 2D points or an (N, 2, 2)
    array. With three pairs or fewer the full cubic gets the minimum-norm
    solution. Otherwise the order (affine, quadratic or cubic) with the best
    leave-one-out residual is fitted; unused cubic terms stay zero.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.size == 0:
        raise InsufficientDataError("personal calibration needs at least one sample")
    if pairs.ndim != 3 or pairs.shape[1:] != (2, 2):
        raise ConfigError(f"calibration pairs must have shape (N, 2, 2), got {pairs.shape}")
    if not np.all(np.isfinite(pairs)):
        raise ConfigError("calibration pairs must be finite")

    estimated, true = pairs[:, 0], pairs[:, 1]
    size = np.array([screen.width_px, screen.height_px], dtype=np.float64)
    basis = monomials(_to_unit_square(estimated, size))
    target = _to_unit_square(true, size)
    terms = _select_terms(basis, target)
    coeffs = np.zeros((2, N_TERMS))
    if terms is None:
        solution, _, rank, _ = np.linalg.lstsq(basis, target, rcond=RCOND)
        coeffs[:] = solution.T
        log.debug(f"{len(pairs)} calibration samples: minimum-norm cubic (rank {rank})")
    else:
        solution = np.linalg.lstsq(basis[:, :terms], target, rcond=RCOND)[0]
        coeffs[:, :terms] = solution.T
        log.debug(f"{len(pairs)} calibration samples: {MODEL_NAMES[terms]} fit")

    corrected = _correct(coeffs, size, estimated)
    rms = float(np.sqrt(np.mean(np.sum((corrected - true) ** 2, axis=1))))
    log.info(f"Personal calibration: {len(pairs)} samples, rms {rms:.3f} px")
    return CalibrationProfile(coeffs, len(pairs), rms, created_at or _now(),
                              (screen.width_px, screen.height_px),
                              estimated.min(axis=0), estimated.max(axis=0))


def apply_calibration_many(profile, points):
    """Correct (N, 2) points; returns the corrected points and per-point extrapolation flags."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    corrected = _correct(profile.coeffs, profile.size, points)
    tol = 1e-9 * profile.size
    outside = np.any((points < profile.input_min - tol) | (points > profile.input_max + tol),
                     axis=1)
    return corrected, outside


def apply_calibration(profile, p):
    """Correct one on-screen point; flags points outside the calibrated region."""
    corrected, outside = apply_calibration_many(profile, [p])
    if outside[0]:
        log.debug(f"calibration extrapolated at {p}")
    return Correction(corrected[0], bool(outside[0]))


# ── Screen calibration through a mirror ──

@dataclass(frozen=True, eq=False)
class MirrorObservation:
    """Detected corners of the reflected pattern and where they sit on the screen (px)."""

    pattern_corners_px: np.ndarray
    pattern_geometry: np.ndarray

    def __post_init__(self):
        corners = np.array(self.pattern_corners_px, dtype=np.float64).reshape(-1, 2)
        geometry = np.array(self.pattern_geometry, dtype=np.float64).reshape(-1, 2)
        if corners.shape != geometry.shape:
            raise ConfigError("every detected corner needs a pattern position")
        if not (np.all(np.isfinite(corners)) and np.all(np.isfinite(geometry))):
            raise ConfigError("mirror observation coordinates must be finite")
        object.__setattr__(self, 'pattern_corners_px', corners)
        object.__setattr__(self, 'pattern_geometry', geometry)


def _as_geometry(screen):
    if isinstance(screen, ScreenGeometry):
        return screen
    return screen.geometry


def _collinear(points_2d):
    centered = points_2d - points_2d.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[0] == 0 or s[1] <= 1e-9 * s[0]


def solve_reflected_pose(obs, cam, screen):
    """Pose of the pattern's reflection (virtual pattern -> camera), mirrored.

    The reflection is left-handed, so the pattern is solved with its y-axis
    flipped (a proper planar PnP) and the flip is folded back into the result.
    """
    geometry = _as_geometry(screen)
    if len(obs.pattern_geometry) < 4:
        raise DegenerateGeometryError(
            f"planar pose needs at least 4 corners, got {len(obs.pattern_geometry)}")
    pattern_mm = geometry.px_to_mm(obs.pattern_geometry)
    if _collinear(pattern_mm[:, :2]) or _collinear(obs.pattern_corners_px):
        raise DegenerateGeometryError("pattern corners are collinear")

    obj = np.ascontiguousarray(pattern_mm @ FLIP_Y)
    img = np.ascontiguousarray(obs.pattern_corners_px)
    dist = np.zeros(5)
    ok, rvec, tvec = cv2.solvePnP(obj, img, cam.matrix, dist, flags=cv2.SOLVEPNP_IPPE)
    if not ok:
        raise DegenerateGeometryError("homography decomposition failed")
    rvec, tvec = cv2.solvePnPRefineLM(obj, img, cam.matrix, dist, rvec, tvec)

    rotation = nearest_rotation(cv2.Rodrigues(rvec)[0]) @ FLIP_Y
    return RigidTransform(rotation, np.asarray(tvec, dtype=np.float64).ravel(), mirrored=True)


def _mirror_normals(rotations, min_angle_deg, max_condition):
    """Mirror normals (up to sign) from pairwise products of virtual rotations.

    R'_j R'_i^T = H_j H_i is a rotation about n_i x n_j by twice the angle
    between the mirrors, so each normal is orthogonal to the axes of all pairs
    it belongs to.
    """
    k = len(rotations)
    axes = {}
    for i, j in combinations(range(k), 2):
        rotvec = Rotation.from_matrix(rotations[j] @ rotations[i].T).as_rotvec()
        angle = np.degrees(np.linalg.norm(rotvec)) / 2.0
        if angle < min_angle_deg:
            log.warning(f"mirror placements {i} and {j} are nearly parallel ({angle:.2f} deg)")
            raise IllConditionedError(
                f"mirrors {i} and {j} differ by only {angle:.2f} deg "
                f"(need > {min_angle_deg:.1f} deg)")
        axes[i, j] = axes[j, i] = rotvec / np.linalg.norm(rotvec)

    normals = []
    for i in range(k):
        rows = np.array([axes[i, j] for j in range(k) if j != i])
        _, s, vt = np.linalg.svd(rows)
        if s[1] < s[0] / max_condition:
            log.warning(f"mirror {i}: singular values {s[0]:.3g}, {s[1]:.3g}")
            raise IllConditionedError(f"mirror {i}: rotation axes are parallel")
        normals.append(vt[-1])
    return normals


def _plane_from_params(n0, basis, a, b):
    n = n0 + a * basis[0] + b * basis[1]
    return n / np.linalg.norm(n)


def calibrate_screen_from_mirrors(observations, cam, pattern_screen_geometry):
    """Recover the screen pose from at least three mirror observations."""
    min_count = get_setting('mirror_min_count')
    min_angle = get_setting('mirror_min_angle_deg')
    max_condition = get_setting('mirror_max_condition')
    geometry = _as_geometry(pattern_screen_geometry)

    if len(observations) < min_count:
        raise InsufficientDataError(
            f"screen calibration needs at least {min_count} mirror observations, "
            f"got {len(observations)}")

    virtual = [solve_reflected_pose(obs, cam, geometry) for obs in observations]
    rotations = [v.rotation for v in virtual]
    normals = _mirror_normals(rotations, min_angle, max_condition)

    # H_k T + 2 d_k n_k = T'_k for every mirror k
    k = len(virtual)
    a = np.zeros((3 * k, 3 + k))
    b = np.zeros(3 * k)
    householders = []
    for i, (n, v) in enumerate(zip(normals, virtual)):
        h = np.eye(3) - 2.0 * np.outer(n, n)
        householders.append(h)
        a[3 * i:3 * i + 3, :3] = h
        a[3 * i:3 * i + 3, 3 + i] = 2.0 * n
        b[3 * i:3 * i + 3] = v.translation
    condition = np.linalg.cond(a)
    if not np.isfinite(condition) or condition > max_condition:
        log.warning(f"mirror system condition number {condition:.3g}")
        raise IllConditionedError(f"mirror system is ill-conditioned ({condition:.3g})")
    x = np.linalg.lstsq(a, b, rcond=None)[0]
    translation, distances = x[:3], x[3:]
    for i in range(k):
        if distances[i] < 0:
            normals[i], distances[i] = -normals[i], -distances[i]

    rotation = nearest_rotation(sum(h @ r for h, r in zip(householders, rotations)) / k)
    log.debug(f"linear screen estimate t = {np.round(translation, 2)} mm")

    # Joint refinement: screen pose + mirror planes on corner reprojection error
    patterns = [geometry.px_to_mm(obs.pattern_geometry) for obs in observations]
    observed = [obs.pattern_corners_px for obs in observations]
    bases = []
    for n in normals:
        _, _, vt = np.linalg.svd(n.reshape(1, 3))
        bases.append(vt[1:])

    def unpack(params):
        r = Rotation.from_rotvec(params[:3]).as_matrix() @ rotation
        t = params[3:6]
        planes = []
        for i in range(k):
            pa, pb, d = params[6 + 3 * i:9 + 3 * i]
            planes.append((_plane_from_params(normals[i], bases[i], pa, pb), d))
        return r, t, planes

    def residuals(params):
        r, t, planes = unpack(params)
        out = []
        for (n, d), pts, obs_px in zip(planes, patterns, observed):
            real = pts @ r.T + t
            virtual_pts = real - 2.0 * np.outer(real @ n - d, n)
            z = np.maximum(virtual_pts[:, 2], 1e-6)
            proj = np.column_stack([cam.fx * virtual_pts[:, 0] / z + cam.cx,
                                    cam.fy * virtual_pts[:, 1] / z + cam.cy])
            out.append((proj - obs_px).ravel())
        return np.concatenate(out)

    x0 = np.concatenate([np.zeros(3), translation]
                        + [[0.0, 0.0, distances[i]] for i in range(k)])
    fit = least_squares(residuals, x0, method='lm', x_scale='jac', xtol=1e-12, ftol=1e-12)
    r, t, _ = unpack(fit.x)
    rms = float(np.sqrt(np.mean(fit.fun ** 2)))
    log.info(f"Screen calibration from {k} mirrors: rms {rms:.4f} px")
    return geometry.at(RigidTransform.from_approx(r, t))
