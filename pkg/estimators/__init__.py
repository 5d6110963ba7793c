"""
Estimators package for the gaze geometry lab.

Every estimator answers ``estimate(EstimatorInput) -> GazeSample``.
Externally produced estimates (CNN outputs, commercial tracker logs) are
carried as EstimateRecord values with one consistent schema, whatever
produced them.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import ConfigError, EstimatorUnavailableError, InvalidVectorError
from geomcore import RigidTransform
from headpose import LandmarkSet
from normalization import NormalizedFrame

log = logging.getLogger(__name__)

# payload kind -> number of values
PAYLOAD_SIZES = {
    'dir3': 3,   # gaze direction, camera frame
    'px2': 2,    # point of regard, screen pixels
}

ESTIMATOR_NAMES = ['geometric', 'replay']


@dataclass(frozen=True, eq=False)
class EstimateRecord:
    """One logged estimate: a 3D direction or a 2D screen point."""

    timestamp: int
    kind: str
    payload: np.ndarray
    source_id: str

    def __post_init__(self):
        if self.kind not in PAYLOAD_SIZES:
            raise ConfigError(f"unknown payload kind {self.kind!r}")
        payload = np.array(self.payload, dtype=np.float64).ravel()
        if payload.shape != (PAYLOAD_SIZES[self.kind],) or not np.all(np.isfinite(payload)):
            raise ConfigError(
                f"{self.kind} payload needs {PAYLOAD_SIZES[self.kind]} finite values, "
                f"got {payload.tolist()}")
        if self.kind == 'dir3' and np.linalg.norm(payload) < 1e-12:
            raise InvalidVectorError("dir3 payload is a zero vector")
        if not self.source_id or any(c.isspace() for c in self.source_id):
            raise ConfigError(f"source id must be a non-empty word, got {self.source_id!r}")
        payload.setflags(write=False)
        object.__setattr__(self, 'payload', payload)
        object.__setattr__(self, 'timestamp', int(self.timestamp))


def make_record(timestamp, source_id, kind, values):
    """Create a normalized EstimateRecord from estimator output.

    This is the canonical form every estimate source is stored in.
    """
    return EstimateRecord(int(timestamp), kind, values, str(source_id))


@dataclass(frozen=True, eq=False)
class EstimatorInput:
    """Everything an estimator may use for one frame.

    ``face_center`` (camera frame, mm) overrides the gaze origin when set.
    """

    landmarks: LandmarkSet
    head_pose: RigidTransform
    normalized: Optional[NormalizedFrame] = None
    timestamp: Optional[int] = None
    face_center: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.timestamp is None:
            object.__setattr__(self, 'timestamp', self.landmarks.timestamp)
        elif int(self.timestamp) != self.landmarks.timestamp:
            raise ConfigError(
                f"input timestamp {self.timestamp} does not match landmarks "
                f"{self.landmarks.timestamp}")
        if self.face_center is not None:
            fc = np.array(self.face_center, dtype=np.float64)
            if fc.shape != (3,) or not np.all(np.isfinite(fc)):
                raise InvalidVectorError("face centre must be a finite 3-vector")
            fc.setflags(write=False)
            object.__setattr__(self, 'face_center', fc)


class GazeEstimator:
    """Base class: immutable after construction, ``estimate`` may run concurrently."""

    name = 'base'

    def estimate(self, inp):
        raise NotImplementedError


def nearest_index(times, t, window_us):
    """Index of the entry of sorted ``times`` nearest to ``t`` within ±window, else None.

    Ties go to the earlier entry.
    """
    if len(times) == 0:
        return None
    i = int(np.searchsorted(times, t))
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(times):
            if best is None or abs(int(times[j]) - t) < abs(int(times[best]) - t):
                best = j
    if abs(int(times[best]) - t) > window_us:
        return None
    return best


def create_estimator(name, **kwargs):
    """Build an estimator by name. Keyword arguments go to its constructor."""
    if name == 'geometric':
        from estimators.geometric import GeometricEstimator
        return GeometricEstimator(**kwargs)
    if name == 'replay':
        from estimators.replay import load_replay_estimator
        return load_replay_estimator(**kwargs)
    raise ConfigError(f"unknown estimator {name!r} (choose from {', '.join(ESTIMATOR_NAMES)})")


__all__ = [
    'EstimateRecord', 'EstimatorInput', 'EstimatorUnavailableError', 'GazeEstimator',
    'PAYLOAD_SIZES', 'create_estimator', 'make_record', 'nearest_index',
]
