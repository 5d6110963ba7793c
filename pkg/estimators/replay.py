"""
Replay adapter for externally produced gaze estimates.

Answers each query with the logged record nearest in time, within a
tolerance window. Records are returned as logged and never interpolated.
2D on-screen points are lifted to rays from the face centre through the
point's position on the screen plane.
"""

import logging

import numpy as np

from config import get_setting
from errors import ConfigError, EstimatorUnavailableError, UnsortedTimestampsError
from estimators import PAYLOAD_SIZES, GazeEstimator, nearest_index
from geomcore import GazeSample, gaze_from_target, screen_px_to_camera_3d
from headpose import default_face_model, face_center

log = logging.getLogger(__name__)


class ReplayEstimator(GazeEstimator):
    name = 'replay'

    def __init__(self, records, payload_kind, screen=None, source_id=None,
                 window_us=None, model=None):
        if payload_kind not in PAYLOAD_SIZES:
            raise ConfigError(f"unknown payload kind {payload_kind!r}")
        if payload_kind == 'px2' and screen is None:
            raise ConfigError("replaying 2D screen points needs a screen model")

        records = [r for r in records if r.kind == payload_kind
                   and (source_id is None or r.source_id == source_id)]
        sources = sorted({r.source_id for r in records})
        if len(sources) > 1:
            raise ConfigError(f"several {payload_kind} sources ({', '.join(sources)}); pick one")

        times = np.array([r.timestamp for r in records], dtype=np.int64)
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            bad = int(np.argmax(np.diff(times) <= 0)) + 1
            raise UnsortedTimestampsError(
                f"replay timestamps not strictly increasing at record {bad} "
                f"({times[bad - 1]} then {times[bad]})")

        self.records = records
        self.payload_kind = payload_kind
        self.source_id = source_id or (sources[0] if sources else None)
        self.screen = screen
        self.window_us = get_setting('replay_window_us') if window_us is None else int(window_us)
        self.model = model or default_face_model()
        self._times = times
        log.debug(f"replay {self.source_id}: {len(records)} {payload_kind} records, "
                  f"window ±{self.window_us} us")

    @classmethod
    def from_records(cls, records, payload_kind=None, **kwargs):
        """Build from in-memory records; the kind defaults to that of the first record."""
        records = list(records)
        if payload_kind is None:
            if not records:
                raise ConfigError("cannot infer the payload kind of an empty stream")
            payload_kind = records[0].kind
        return cls(records, payload_kind, **kwargs)

    def __len__(self):
        return len(self.records)

    def lookup(self, timestamp):
        """The logged record nearest to ``timestamp`` within the window."""
        i = nearest_index(self._times, int(timestamp), self.window_us)
        if i is None:
            raise EstimatorUnavailableError(
                f"no {self.source_id} record within ±{self.window_us} us of t={timestamp}")
        return self.records[i]

    def estimate(self, inp):
        record = self.lookup(inp.timestamp)
        origin = inp.face_center
        if origin is None:
            origin = face_center(inp.head_pose, self.model)

        if record.kind == 'dir3':
            direction = record.payload
            norm = np.linalg.norm(direction)
            if abs(norm - 1.0) > 1e-12:
                direction = direction / norm
            return GazeSample(origin, direction, inp.timestamp)

        target = screen_px_to_camera_3d(record.payload, self.screen).xyz
        return gaze_from_target(origin, target, inp.timestamp)


def load_replay_estimator(path, payload_kind, screen=None, source_id=None,
                          window_us=None, model=None):
    """Load a replay or session file and build a ReplayEstimator over one source."""
    from formats import parse_replay

    streams = parse_replay(path)
    records = [r for stream in streams.values() for r in stream]
    if source_id is None:
        sources = sorted({r.source_id for r in records if r.kind == payload_kind})
        if len(sources) != 1:
            raise ConfigError(
                f"{path}: expected one {payload_kind} source, found "
                f"{', '.join(sources) or 'none'}; pass source_id")
        source_id = sources[0]
    estimator = ReplayEstimator(records, payload_kind, screen=screen, source_id=source_id,
                                window_us=window_us, model=model)
    log.info(f"Loaded {len(estimator)} {payload_kind} records for {source_id} from {path}")
    return estimator
