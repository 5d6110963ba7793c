"""
Configuration for the Gaze Geometry Lab.

Provides project paths, default settings, and a helper for reading
settings with fallbacks (explicit overrides -> environment -> defaults).
"""

import os
from pathlib import Path

PROJECT_ROOT = Path(__file__).parent
DATA_DIR = PROJECT_ROOT / "data"
LOG_PATH = DATA_DIR / "gazelab.log"

# Recording distances of the protocol (mm)
SWEEP_DISTANCES_MM = [300.0, 500.0, 750.0, 1100.0, 1400.0, 1800.0]

# Calibration-sample ladder of the calibration sweep
SWEEP_CALIBRATION_COUNTS = [0, 1, 2, 3, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60]

SUPPORTED_CONDITIONS = ['indoor', 'outdoor', 'glasses']

LANDMARK_NAMES = [
    'outer_left_eye', 'inner_left_eye', 'inner_right_eye',
    'outer_right_eye', 'left_mouth', 'right_mouth',
]

# Generic face model, head frame (mm): x right in the image, y down, z away
# from the camera when the head faces it.
DEFAULT_FACE_MODEL = {
    'outer_left_eye': (-45.0, 0.0, 8.0),
    'inner_left_eye': (-15.0, 0.0, 0.0),
    'inner_right_eye': (15.0, 0.0, 0.0),
    'outer_right_eye': (45.0, 0.0, 8.0),
    'left_mouth': (-30.0, 55.0, 5.0),
    'right_mouth': (30.0, 55.0, 5.0),
    'left_eyeball': (-30.0, 0.0, 16.0),
    'right_eyeball': (30.0, 0.0, 16.0),
    'eyeball_radius': 12.0,
}

# Default settings; every key can be overridden via GAZELAB_<KEY>
DEFAULT_SETTINGS = {
    # camera (1080p webcam class)
    'camera_fx': 1400.0,
    'camera_fy': 1400.0,
    'camera_cx': 960.0,
    'camera_cy': 540.0,
    'camera_width_px': 1920,
    'camera_height_px': 1080,

    # head pose
    'pose_max_iterations': 30,
    'pose_failure_px': 10.0,

    # normalization
    'norm_distance_mm': 600.0,
    'norm_focal_px': 960.0,
    'norm_patch_px': 448,

    # estimators
    'replay_window_us': 10_000,

    # synthetic lab
    'frame_step_us': 33_333,
    'n_samples': 80,
    'region_width_deg': 34.5,
    'region_height_deg': 19.8,
    'screen_pixel_pitch_mm': 0.25,
    'screen_margin': 1.1,
    'screen_gap_mm': 10.0,
    'outdoor_noise_factor': 1.5,
    'outdoor_dropout_factor': 3.0,
    'glasses_bias_px': 2.0,
    'glasses_iris_factor': 2.0,
    'tracker_min_mm': 500.0,
    'tracker_max_mm': 900.0,

    # calibration
    'mirror_count': 5,
    'mirror_min_count': 3,
    'mirror_min_angle_deg': 5.0,
    'mirror_max_condition': 1e8,

    # bench
    'align_window_us': 100_000,
    'n_calibration': 60,
    'n_test': 20,
}


def get_setting(key, overrides=None):
    """Get a setting: overrides dict -> GAZELAB_<KEY> env var -> DEFAULT_SETTINGS.

    Environment values are coerced to the type of the default.
    """
    if overrides and overrides.get(key) is not None:
        return overrides[key]

    default = DEFAULT_SETTINGS[key]
    raw = os.environ.get(f"GAZELAB_{key.upper()}")
    if raw is None or raw == '':
        return default

    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ('1', 'true', 'yes', 'on')
        if isinstance(default, int):
            return int(float(raw))
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        # Unparseable values fall back to the default
        return default
    return raw
