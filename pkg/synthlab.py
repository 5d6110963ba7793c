"""
Synthetic scene generator (the virtual lab).

Emulates the recording protocol: a participant sits at a fixed distance in
front of a screen and looks at click-confirmed targets, one per frame, while
the camera above the screen sees six facial landmarks and two iris centres.
Targets fill a region whose visual angle is the same at every distance, so
larger screens stand in for larger distances.

Three estimate streams come out alongside the landmarks:
  appearance  3D directions: ground truth plus a per-session bias and angular noise
  tracker     2D screen points with pixel noise, only inside an operating range
  (the geometric estimator runs on the landmark stream itself)

Randomness uses numpy's PCG64 generator. Each sample i draws from its own
stream, SeedSequence(seed, spawn_key=(0, i)), always in the same order:
3 jitter uniforms, 12 landmark normals, 4 iris normals, 2 direction normals,
2 tracker normals, 1 dropout uniform. Session-wide draws (target order,
glasses bias) come from SeedSequence(seed, spawn_key=(1,)). A session is
therefore reproducible whatever order it is evaluated in.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.stats import qmc

from calibration import MirrorObservation
from config import SUPPORTED_CONDITIONS, get_setting
from errors import ConfigError, DegenerateGeometryError
from estimators import make_record
from formats import ClickEvent, SessionLog, quantity_value
from geomcore import (
    GazeSample, MirrorPlane, RigidTransform, ScreenModel, default_intrinsics,
    gaze_from_target, normalize, reflect_pose, screen_px_to_camera_3d,
)
from headpose import LandmarkSet, default_face_model, face_center

log = logging.getLogger(__name__)

APPEARANCE_SOURCE = 'appearance'
TRACKER_SOURCE = 'tracker'
TARGET_SAMPLING = ('stratified', 'random')


def _setting(key):
    return field(default_factory=lambda: get_setting(key))


@dataclass(frozen=True)
class SceneConfig:
    """One recording session. Angles in degrees, lengths in mm, times in µs.

    The target region is given as a visual angle unless ``region_width_mm``
    and ``region_height_mm`` are set. ``direction_noise_deg`` is the RMS
    angular deviation of the appearance stream.
    """

    distance_mm: float = 750.0
    region_width_deg: float = _setting('region_width_deg')
    region_height_deg: float = _setting('region_height_deg')
    region_width_mm: Optional[float] = None
    region_height_mm: Optional[float] = None
    n_samples: int = _setting('n_samples')
    landmark_noise_px: float = 0.0
    iris_noise_px: float = 0.0
    direction_noise_deg: float = 0.0
    direction_bias_deg: tuple = (0.0, 0.0)
    tracker_noise_px: float = 0.0
    tracker_range_mm: tuple = field(default_factory=lambda: (
        get_setting('tracker_min_mm'), get_setting('tracker_max_mm')))
    tracker_dropout: float = 0.0
    head_pose_jitter: tuple = (15.0, 10.0, 5.0)
    condition_tag: str = 'indoor'
    participant_id: str = 'p00'
    seed: int = 0
    target_sampling: str = 'stratified'
    frame_step_us: int = _setting('frame_step_us')

    def __post_init__(self):
        if not self.distance_mm > 0:
            raise ConfigError(f"distance must be positive, got {self.distance_mm}")
        if not self.n_samples > 0:
            raise ConfigError(f"n_samples must be positive, got {self.n_samples}")
        noises = (self.landmark_noise_px, self.iris_noise_px, self.direction_noise_deg,
                  self.tracker_noise_px)
        if min(noises) < 0:
            raise ConfigError("noise levels must be non-negative")
        if min(self.head_pose_jitter) < 0 or len(self.head_pose_jitter) != 3:
            raise ConfigError("head pose jitter needs three non-negative ranges (yaw, pitch, roll)")
        if len(self.direction_bias_deg) != 2:
            raise ConfigError("direction bias needs yaw and pitch")
        if not 0.0 <= self.tracker_dropout <= 1.0:
            raise ConfigError("tracker dropout is a probability")
        if self.condition_tag not in SUPPORTED_CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition_tag!r} "
                              f"(choose from {', '.join(SUPPORTED_CONDITIONS)})")
        if self.target_sampling not in TARGET_SAMPLING:
            raise ConfigError(f"target_sampling must be one of {', '.join(TARGET_SAMPLING)}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must fit in 64 unsigned bits")
        if (self.region_width_mm is None) != (self.region_height_mm is None):
            raise ConfigError("give both region_width_mm and region_height_mm, or neither")
        if self.region_width_mm is None and not (
                0 < self.region_width_deg < 180 and 0 < self.region_height_deg < 180):
            raise ConfigError("region angles must lie in (0, 180) degrees")
        if not self.frame_step_us > 0:
            raise ConfigError("frame step must be positive")
        if not self.participant_id or any(c.isspace() for c in self.participant_id):
            raise ConfigError("participant id must be a single word")


@dataclass(frozen=True, eq=False)
class GroundTruthSample:
    """Everything the generator knows about one sample.

    ``noise`` holds the 12 landmark then 4 iris perturbations (px) that were
    added to the exact projections.
    """

    target_px: np.ndarray
    target_cam: np.ndarray
    head_pose: RigidTransform
    face_center: np.ndarray
    gaze: GazeSample
    landmarks: LandmarkSet
    noise: np.ndarray
    timestamp: int


class ConditionNoise(NamedTuple):
    landmark_px: float
    iris_px: float
    direction_deg: float
    landmark_bias_px: float
    tracker_dropout: float


# ── Config plumbing ──

_LENGTH_KEYS = {'distance': 'distance_mm', 'distance_mm': 'distance_mm'}
_PLAIN_KEYS = {
    'n_samples': int, 'landmark_noise_px': float, 'iris_noise_px': float,
    'direction_noise_deg': float, 'tracker_noise_px': float, 'tracker_dropout': float,
    'condition_tag': str, 'condition': str, 'participant_id': str, 'seed': int,
    'target_sampling': str,
}


def _pair(value, key, count):
    values = value if isinstance(value, list) else [value]
    if len(values) != count:
        raise ConfigError(f"{key} needs {count} values, got {len(values)}")
    return values


def scene_config_from_mapping(values, ignore=()):
    """Build a SceneConfig from a parsed config mapping (see formats.loads_config).

    Region sizes may be given as angles (``34.5deg``) or lengths (``466mm``).
    Keys listed in ``ignore`` belong to the caller and are skipped.
    """
    kwargs = {}
    for key, value in values.items():
        if key in ignore:
            continue
        if key in _LENGTH_KEYS:
            kwargs['distance_mm'] = quantity_value(value, 'length', key)
        elif key in ('region_width', 'region_height'):
            axis = key.split('_')[1]
            if getattr(value, 'kind', None) == 'length':
                kwargs[f"region_{axis}_mm"] = value.value
            else:
                kwargs[f"region_{axis}_deg"] = quantity_value(value, 'angle', key)
        elif key in ('region_width_deg', 'region_height_deg'):
            kwargs[key] = quantity_value(value, 'angle', key)
        elif key in ('region_width_mm', 'region_height_mm'):
            kwargs[key] = quantity_value(value, 'length', key)
        elif key in ('direction_bias', 'direction_bias_deg'):
            kwargs['direction_bias_deg'] = tuple(
                quantity_value(v, 'angle', key) for v in _pair(value, key, 2))
        elif key in ('head_pose_jitter', 'head_pose_jitter_deg'):
            kwargs['head_pose_jitter'] = tuple(
                quantity_value(v, 'angle', key) for v in _pair(value, key, 3))
        elif key in ('tracker_range', 'tracker_range_mm'):
            kwargs['tracker_range_mm'] = tuple(
                quantity_value(v, 'length', key) for v in _pair(value, key, 2))
        elif key in ('frame_step', 'frame_step_us'):
            kwargs['frame_step_us'] = int(round(quantity_value(value, 'time', key)))
        elif key in _PLAIN_KEYS:
            target = 'condition_tag' if key == 'condition' else key
            cast = _PLAIN_KEYS[key]
            if cast is str:
                kwargs[target] = str(value)
            elif cast is int:
                if isinstance(value, bool) or not isinstance(value, (int, float)) \
                        or value != int(value):
                    raise ConfigError(f"{key} must be an integer, got {value!r}")
                kwargs[target] = int(value)
            elif target == 'direction_noise_deg':
                kwargs[target] = quantity_value(value, 'angle', key)
            else:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key} must be a plain number, got {value!r}")
                kwargs[target] = float(value)
        else:
            known = sorted({f.name for f in fields(SceneConfig)})
            raise ConfigError(f"unknown scene key {key!r} (known: {', '.join(known)})")
    return SceneConfig(**kwargs)


# ── Geometry helpers ──

def region_extent_mm(angle_deg, distance_mm):
    """Chord of a visual angle centred on the line of sight."""
    return 2.0 * distance_mm * np.tan(np.radians(angle_deg) / 2.0)


def region_visual_angle_deg(extent_mm, distance_mm):
    return float(np.degrees(2.0 * np.arctan(extent_mm / (2.0 * distance_mm))))


def region_size_mm(cfg):
    if cfg.region_width_mm is not None:
        return float(cfg.region_width_mm), float(cfg.region_height_mm)
    return (region_extent_mm(cfg.region_width_deg, cfg.distance_mm),
            region_extent_mm(cfg.region_height_deg, cfg.distance_mm))


def screen_for_region(width_mm, height_mm, pixel_pitch_mm=None, margin=None, gap_mm=None):
    """Screen just larger than a region, centred below the camera, facing the user."""
    pitch = pixel_pitch_mm or get_setting('screen_pixel_pitch_mm')
    margin = margin or get_setting('screen_margin')
    gap = get_setting('screen_gap_mm') if gap_mm is None else gap_mm
    width_px = int(np.ceil(width_mm * margin / pitch))
    height_px = int(np.ceil(height_mm * margin / pitch))
    width = width_px * pitch
    height = height_px * pitch
    pose = RigidTransform(np.eye(3), [-width / 2.0, gap, 0.0])
    return ScreenModel(pose, width, height, width_px, height_px)


def screen_for_distance(distance_mm, region_deg=None, **kwargs):
    """Screen sized for the constant-visual-angle region at ``distance_mm``."""
    w_deg, h_deg = region_deg or (get_setting('region_width_deg'),
                                  get_setting('region_height_deg'))
    return screen_for_region(region_extent_mm(w_deg, distance_mm),
                             region_extent_mm(h_deg, distance_mm), **kwargs)


def condition_noise(cfg):
    """Noise levels after the condition surrogate is applied."""
    landmark, iris, direction = cfg.landmark_noise_px, cfg.iris_noise_px, cfg.direction_noise_deg
    bias, dropout = 0.0, cfg.tracker_dropout
    if cfg.condition_tag == 'outdoor':
        factor = get_setting('outdoor_noise_factor')
        landmark, iris, direction = landmark * factor, iris * factor, direction * factor
        dropout = min(1.0, dropout * get_setting('outdoor_dropout_factor'))
    elif cfg.condition_tag == 'glasses':
        factor = get_setting('glasses_iris_factor')
        bias = get_setting('glasses_bias_px')
        iris, direction = iris * factor, direction * factor
    return ConditionNoise(landmark, iris, direction, bias, dropout)


def perturb_direction(direction, yaw_deg, pitch_deg):
    """Rotate a unit direction by small angles about two axes perpendicular to it.

    The yaw axis is the camera y-axis made orthogonal to the direction; the
    angle between input and output is exactly hypot(yaw, pitch).
    """
    g = normalize(direction)
    up = np.array([0.0, 1.0, 0.0])
    v = up - (up @ g) * g
    if np.linalg.norm(v) < 1e-9:
        v = np.array([1.0, 0.0, 0.0]) - g[0] * g
    v = normalize(v)
    w = np.cross(g, v)
    rotvec = np.radians(yaw_deg) * v + np.radians(pitch_deg) * w
    return Rotation.from_rotvec(rotvec).apply(g)


def _unit_targets(cfg, rng):
    n = cfg.n_samples
    if cfg.target_sampling == 'random':
        return rng.random((n, 2))
    # Halton points with a random (Cranley-Patterson) shift
    shift = rng.random(2)
    return (qmc.Halton(d=2, scramble=False).random(n) + shift) % 1.0


# ── Operations ──

def generate_session(cfg, model=None, cam=None, screen=None):
    """Generate one session: (SessionLog, list of GroundTruthSample)."""
    model = model or default_face_model()
    cam = cam or default_intrinsics()
    screen = screen or screen_for_region(*region_size_mm(cfg))

    region_px = np.array(region_size_mm(cfg)) / screen.mm_per_px
    if region_px[0] > screen.width_px * (1 + 1e-9) or region_px[1] > screen.height_px * (1 + 1e-9):
        raise ConfigError(
            f"target region {region_px[0]:.0f}x{region_px[1]:.0f} px does not fit on the "
            f"{screen.width_px}x{screen.height_px} px screen")
    region_origin = screen.center_px - region_px / 2.0
    center = screen_px_to_camera_3d(screen.center_px, screen).xyz
    face_target = center + cfg.distance_mm * screen.normal

    noise = condition_noise(cfg)
    session_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    bias_angle = session_rng.random() * 2.0 * np.pi
    landmark_bias = noise.landmark_bias_px * np.array([np.cos(bias_angle), np.sin(bias_angle)])
    unit_targets = _unit_targets(cfg, session_rng)
    jitter_range = np.asarray(cfg.head_pose_jitter, dtype=np.float64)
    tracking = cfg.tracker_range_mm[0] <= cfg.distance_mm <= cfg.tracker_range_mm[1]

    log_ = SessionLog(metadata={
        'condition_tag': cfg.condition_tag,
        'distance_mm': float(cfg.distance_mm),
        'intrinsics': cam,
        'participant_id': cfg.participant_id,
        'screen': screen,
        'seed': str(int(cfg.seed)),
    })
    appearance, tracker, truth = [], [], []

    for i in range(cfg.n_samples):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0, i)))
        jitter = (rng.random(3) * 2.0 - 1.0) * jitter_range
        z_landmark = rng.standard_normal(12)
        z_iris = rng.standard_normal(4)
        z_direction = rng.standard_normal(2)
        z_tracker = rng.standard_normal(2)
        u_dropout = rng.random()

        t = i * cfg.frame_step_us
        target_px = region_origin + unit_targets[i] * region_px
        target_cam = screen_px_to_camera_3d(target_px, screen).xyz

        rotation = screen.pose.rotation @ Rotation.from_euler(
            'yxz', jitter, degrees=True).as_matrix()
        head_pose = RigidTransform(rotation, face_target - rotation @ model.centroid)
        fc = face_center(head_pose, model)
        gaze = gaze_from_target(fc, target_cam, t)

        eyes = head_pose.apply(model.eyeball_centers)
        pupils = np.array([e + model.eyeball_radius * normalize(target_cam - e) for e in eyes])
        landmark_noise = np.tile(landmark_bias, 6) + noise.landmark_px * z_landmark
        iris_noise = noise.iris_px * z_iris
        landmarks = LandmarkSet(
            cam.project(head_pose.apply(model.points)) + landmark_noise.reshape(6, 2),
            cam.project(pupils) + iris_noise.reshape(2, 2),
            t)

        log_.landmarks.append(landmarks)
        log_.clicks.append(ClickEvent(t, target_px))
        angular = np.asarray(cfg.direction_bias_deg) + noise.direction_deg / np.sqrt(2.0) * z_direction
        appearance.append(make_record(t, APPEARANCE_SOURCE, 'dir3',
                                      perturb_direction(gaze.direction, *angular)))
        if tracking and u_dropout >= noise.tracker_dropout:
            tracker.append(make_record(t, TRACKER_SOURCE, 'px2',
                                       target_px + cfg.tracker_noise_px * z_tracker))

        truth.append(GroundTruthSample(
            target_px=target_px, target_cam=target_cam, head_pose=head_pose,
            face_center=fc, gaze=gaze, landmarks=landmarks,
            noise=np.concatenate([landmark_noise, iris_noise]), timestamp=t))

    log_.estimates[APPEARANCE_SOURCE] = appearance
    if tracker:
        log_.estimates[TRACKER_SOURCE] = tracker
    log.debug(f"session seed={cfg.seed} d={cfg.distance_mm:.0f} mm {cfg.condition_tag}: "
              f"{cfg.n_samples} samples, {len(tracker)} tracker records")
    return log_, truth


def reflect_scene(screen, mirror_plane):
    """The screen as seen in a mirror: a virtual, left-handed ScreenModel."""
    if not isinstance(mirror_plane, MirrorPlane):
        mirror_plane = MirrorPlane(*mirror_plane)
    if abs(mirror_plane.distance) < 1e-9:
        raise DegenerateGeometryError("the camera centre lies on the mirror plane")
    return ScreenModel(reflect_pose(screen.pose, mirror_plane), screen.width_mm,
                       screen.height_mm, screen.width_px, screen.height_px)


def mirror_planes(screen, count=None, distance_mm=400.0, jitter_deg=0.0, seed=0):
    """Mirror placements in front of the camera that show it the screen.

    The first mirror faces the camera squarely; the rest are tilted 8-12°
    along a golden-angle spiral so every pair differs by well over 5°.
    """
    count = count or get_setting('mirror_count')
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    center = screen_px_to_camera_3d(screen.center_px, screen).xyz
    point = np.array([center[0], center[1] / 2.0, distance_mm])
    planes = []
    for k in range(count):
        tilt = 0.0 if k == 0 else 8.0 + 2.0 * (k % 3)
        heading = np.radians(137.5 * k)
        axis = np.array([np.cos(heading), np.sin(heading), 0.0])
        rotvec = np.radians(tilt) * axis + np.radians(jitter_deg) * rng.standard_normal(3)
        normal = Rotation.from_rotvec(rotvec).apply([0.0, 0.0, -1.0])
        planes.append(MirrorPlane(point, normal))
    return planes


def pattern_grid(screen, grid=(7, 5), coverage=0.6):
    """Pattern corner positions (screen px): a grid over the central part of the screen."""
    cols, rows = grid
    half = coverage / 2.0
    xs = np.linspace(0.5 - half, 0.5 + half, cols) * screen.width_px
    ys = np.linspace(0.5 - half, 0.5 + half, rows) * screen.height_px
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def simulate_mirror_observations(screen, planes, cam=None, grid=(7, 5), noise_px=0.0, seed=0):
    """Detected pattern corners of the screen's reflection in each mirror."""
    cam = cam or default_intrinsics()
    pattern = pattern_grid(screen, grid)
    pattern_mm = screen.geometry.px_to_mm(pattern)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    observations = []
    for plane in planes:
        virtual = reflect_scene(screen, plane)
        corners = cam.project(virtual.pose.apply(pattern_mm))
        corners = corners + noise_px * rng.standard_normal(corners.shape)
        observations.append(MirrorObservation(corners, pattern))
    return observations
