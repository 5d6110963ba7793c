"""
Model-based gaze estimator.

Places the model eyeballs under the estimated head pose, back-projects each
detected iris centre, and takes the near intersection of that camera ray
with the eyeball sphere as the pupil. Each eye's gaze runs from its eyeball
centre through its pupil.
"""

import logging
from typing import NamedTuple, Optional

import numpy as np

from errors import (
    BehindCameraError, EstimatorUnavailableError, NoIntersectionError, NoSolutionError,
)
from estimators import GazeEstimator
from geomcore import (
    GazeSample, default_intrinsics, gaze_from_target, intersect_ray_screen, normalize,
    screen_px_to_camera_3d,
)
from headpose import default_face_model, face_center

log = logging.getLogger(__name__)

TANGENT_TOL = 1e-9


class EyePair(NamedTuple):
    left: Optional[GazeSample]
    right: Optional[GazeSample]


def intersect_ray_sphere(direction, center, radius):
    """Near intersection of the camera ray s·direction (s > 0) with a sphere.

    A tangent ray gives its single touching point; a ray passing outside
    raises NoSolutionError.
    """
    d = normalize(direction)
    c = np.asarray(center, dtype=np.float64)
    b = float(d @ c)
    cc = float(c @ c)
    disc = b * b - (cc - radius * radius)
    if disc < -TANGENT_TOL * cc:
        raise NoSolutionError(f"ray misses the eyeball (discriminant {disc:.3g})")
    s = b - np.sqrt(max(disc, 0.0))
    if s <= 0:
        raise NoSolutionError("eyeball is not in front of the camera")
    return s * d


def geometric_estimate(inp, model, cam):
    """Per-eye gaze rays (left, right); an eye whose ray misses its sphere is None."""
    if not inp.landmarks.has_iris:
        raise EstimatorUnavailableError("frame has no iris centres")

    centers = inp.head_pose.apply(model.eyeball_centers)
    eyes = []
    for side, center, iris in zip(('left', 'right'), centers, inp.landmarks.iris_centers):
        try:
            pupil = intersect_ray_sphere(cam.pixel_ray(iris), center, model.eyeball_radius)
        except NoSolutionError as e:
            log.debug(f"t={inp.timestamp}: {side} eye: {e}")
            eyes.append(None)
            continue
        eyes.append(GazeSample(center, normalize(pupil - center), inp.timestamp))

    if eyes[0] is None and eyes[1] is None:
        raise EstimatorUnavailableError("neither iris ray meets its eyeball")
    return EyePair(*eyes)


class GeometricEstimator(GazeEstimator):
    """Landmark-geometry estimator; fuses both eyes into one face-centre ray.

    With a screen, the fused ray points at the midpoint of the per-eye screen
    intersections. Without one, it follows the mean eye direction.
    """

    name = 'geometric'

    def __init__(self, model=None, cam=None, screen=None):
        self.model = model or default_face_model()
        self.cam = cam or default_intrinsics()
        self.screen = screen

    def estimate_eyes(self, inp):
        return geometric_estimate(inp, self.model, self.cam)

    def estimate(self, inp):
        eyes = [e for e in self.estimate_eyes(inp) if e is not None]
        origin = inp.face_center
        if origin is None:
            origin = face_center(inp.head_pose, self.model)

        if self.screen is None:
            direction = normalize(sum(e.direction for e in eyes))
            return GazeSample(origin, direction, inp.timestamp)

        try:
            points = [intersect_ray_screen(e, self.screen).px for e in eyes]
        except (NoIntersectionError, BehindCameraError) as e:
            raise EstimatorUnavailableError(f"eye ray does not reach the screen: {e}") from e
        midpoint = np.mean(points, axis=0)
        target = screen_px_to_camera_3d(midpoint, self.screen).xyz
        return gaze_from_target(origin, target, inp.timestamp)
