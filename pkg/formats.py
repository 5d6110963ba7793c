"""
Readers and writers for every on-disk format of the gaze geometry lab.

Line formats (session logs, replay files, ground truth) share one grammar:
a ``#format <name> <version>`` header, ``#meta <key> <value>`` lines, then
one record per line: ``timestamp_us source_id kind v1 v2 ...``. JSON
documents (calibration profiles, screen models, mirror observations,
result tables) carry ``format`` and ``version`` fields. docs/formats.md is
the normative description.

Floats in line formats are written with 17 significant digits; JSON uses
the shortest repr that reads back to the same double. Keys and records are
written in a fixed order, so repeated writes are byte-identical. Every
write goes to a temporary file in the target directory and is renamed into
place. Parsers raise FormatError subclasses on any bad input, with the
file and line when known.
"""

import io
import json
import logging
import os
import re
import tempfile
from contextlib import contextmanager, suppress
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import cv2
import numpy as np
import pandas as pd

from errors import (
    ConfigError, FormatError, GazeLabError, ParseError, SchemaError, UnitError,
    UnsortedTimestampsError, VersionError,
)
from estimators import PAYLOAD_SIZES, make_record
from geomcore import CameraIntrinsics, GazeSample, RigidTransform, ScreenGeometry, ScreenModel
from headpose import LandmarkSet

log = logging.getLogger(__name__)

SESSION_FORMAT = 'gazelab-session'
REPLAY_FORMAT = 'gazelab-replay'
TRUTH_FORMAT = 'gazelab-truth'
PROFILE_FORMAT = 'gazelab-profile'
SCREEN_FORMAT = 'gazelab-screen'
MIRRORS_FORMAT = 'gazelab-mirrors'
TABLE_FORMAT = 'gazelab-table'

# Newest version of each format this reader understands
FORMAT_VERSIONS = {
    SESSION_FORMAT: 1,
    REPLAY_FORMAT: 1,
    TRUTH_FORMAT: 1,
    PROFILE_FORMAT: 1,
    SCREEN_FORMAT: 1,
    MIRRORS_FORMAT: 1,
    TABLE_FORMAT: 1,
}

LANDMARK_SOURCE = 'camera'
CLICK_SOURCE = 'click'
TRUTH_SOURCE = 'truth'
RESERVED_SOURCES = {LANDMARK_SOURCE, CLICK_SOURCE, TRUTH_SOURCE}

# Ground-truth record kinds, in write order, with their value counts
TRUTH_KINDS = {
    'target': (5,),        # target px (2), target in camera frame (3)
    'pose': (12,),         # rotation row-major (9), translation (3)
    'face': (3,),
    'gaze': (6,),          # origin (3), direction (3)
    'landmarks': (12, 16),
    'noise': (16,),        # landmark noise (12), iris noise (4)
}

_INT_RE = re.compile(r'[+-]?\d{1,18}')
_FLOAT_RE = re.compile(r'[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d{1,4})?')
_KEY_RE = re.compile(r'[A-Za-z_][A-Za-z0-9_.\-]*')
_QUANTITY_RE = re.compile(r'([+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d{1,4})?)\s*([A-Za-z]+)')


def _fmt(x):
    return '%.17g' % x


# ── Types ──

class FileHeader(NamedTuple):
    format_name: str
    format_version: int
    metadata: dict


@dataclass(frozen=True, eq=False)
class ClickEvent:
    """A click-confirmed fixation target (screen pixels)."""

    timestamp: int
    target_px: np.ndarray

    def __post_init__(self):
        target = np.array(self.target_px, dtype=np.float64).ravel()
        if target.shape != (2,) or not np.all(np.isfinite(target)):
            raise ConfigError(f"click target must be two finite values, got {target.tolist()}")
        target.setflags(write=False)
        object.__setattr__(self, 'target_px', target)
        object.__setattr__(self, 'timestamp', int(self.timestamp))


@dataclass(eq=False)
class SessionLog:
    """Landmark frames, estimate streams by source, click events and metadata."""

    landmarks: list = field(default_factory=list)
    estimates: dict = field(default_factory=dict)
    clicks: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def screen(self):
        return self.metadata.get('screen')

    @property
    def intrinsics(self):
        return self.metadata.get('intrinsics')

    @property
    def distance_mm(self):
        return self.metadata.get('distance_mm')

    @property
    def condition_tag(self):
        return self.metadata.get('condition_tag', '')

    @property
    def participant_id(self):
        return self.metadata.get('participant_id', '')

    @property
    def sources(self):
        return sorted(self.estimates)

    def validate(self):
        """Check every stream is strictly increasing in time."""
        streams = {LANDMARK_SOURCE: self.landmarks, CLICK_SOURCE: self.clicks}
        for source, records in self.estimates.items():
            if source in RESERVED_SOURCES:
                raise ConfigError(f"estimate source name {source!r} is reserved")
            streams[source] = records
        for name, stream in streams.items():
            times = [r.timestamp for r in stream]
            for a, b in zip(times, times[1:]):
                if b <= a:
                    raise UnsortedTimestampsError(
                        f"stream {name}: timestamp {b} does not follow {a}")


class Quantity(NamedTuple):
    """A config value given with a unit, converted to mm, deg or us."""

    value: float
    kind: str


UNITS = {
    'mm': ('length', 1.0),
    'cm': ('length', 10.0),
    'm': ('length', 1000.0),
    'in': ('length', 25.4),
    'deg': ('angle', 1.0),
    'us': ('time', 1.0),
    'ms': ('time', 1000.0),
    's': ('time', 1_000_000.0),
}


# ── File plumbing ──

def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temporary file and a rename."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode('utf-8')
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        with suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    log.debug(f"wrote {path} ({len(data)} bytes)")
    return path


def _decode(data, path=None):
    if isinstance(data, str):
        return data
    try:
        return bytes(data).decode('utf-8')
    except UnicodeDecodeError as e:
        raise ParseError(f"not UTF-8 text ({e.reason} at byte {e.start})", path) from None


@contextmanager
def _schema(what, path=None, line=None):
    """Turn any validation failure inside the block into a located SchemaError."""
    try:
        yield
    except FormatError:
        raise
    except KeyError as e:
        raise SchemaError(f"{what}: missing field {e.args[0]!r}", path, line) from None
    except (GazeLabError, TypeError, ValueError, IndexError, AttributeError,
            OverflowError, RecursionError) as e:
        raise SchemaError(f"{what}: {e}", path, line) from None


def _check_version(name, version, path=None, line=None, accepted=None):
    accepted = accepted or [name]
    if name not in accepted:
        raise VersionError(f"expected format {' or '.join(accepted)}, got {name!r}", path, line)
    if isinstance(version, bool) or not isinstance(version, int):
        raise SchemaError(f"format version must be an integer, got {version!r}", path, line)
    if version < 1 or version > FORMAT_VERSIONS[name]:
        raise VersionError(
            f"{name} version {version} not supported (this reader knows up to "
            f"{FORMAT_VERSIONS[name]})", path, line)


# ── Line formats ──

class _Record(NamedTuple):
    line: int
    timestamp: int
    source: str
    kind: str
    values: np.ndarray


def _split_document(data, path, accepted, header_required=True):
    """Parse the shared line grammar into (FileHeader, meta line numbers, records)."""
    text = _decode(data, path)
    header = None
    meta = {}
    meta_lines = {}
    records = []

    for lineno, raw in enumerate(text.split('\n'), start=1):
        line = raw.rstrip('\r')
        if not line.strip():
            continue
        if line.startswith('#format'):
            tokens = line.split()
            if header is not None or records or meta:
                raise ParseError("#format must be the first line", path, lineno)
            if len(tokens) != 3 or tokens[0] != '#format':
                raise ParseError("expected '#format <name> <version>'", path, lineno)
            if not re.fullmatch(r'\d{1,9}', tokens[2]):
                raise ParseError(f"bad format version {tokens[2]!r}", path, lineno)
            _check_version(tokens[1], int(tokens[2]), path, lineno, accepted)
            header = (tokens[1], int(tokens[2]))
            continue
        if header is None and header_required:
            raise ParseError("missing '#format' header", path, lineno)
        if line.startswith('#meta'):
            tokens = line.split(None, 2)
            if tokens[0] != '#meta' or len(tokens) < 2 or not _KEY_RE.fullmatch(tokens[1]):
                raise ParseError("expected '#meta <key> <value>'", path, lineno)
            if records:
                raise ParseError("#meta lines must precede records", path, lineno)
            if tokens[1] in meta:
                raise ParseError(f"duplicate metadata key {tokens[1]!r}", path, lineno)
            meta[tokens[1]] = tokens[2].strip() if len(tokens) == 3 else ''
            meta_lines[tokens[1]] = lineno
            continue
        if line.lstrip().startswith('#'):
            continue

        tokens = line.split()
        if len(tokens) < 3:
            raise ParseError("expected 'timestamp_us source kind values...'", path, lineno)
        if not _INT_RE.fullmatch(tokens[0]):
            raise ParseError(f"bad timestamp {tokens[0]!r}", path, lineno)
        for tok in tokens[3:]:
            if not _FLOAT_RE.fullmatch(tok):
                raise ParseError(f"bad number {tok!r}", path, lineno)
        values = np.array([float(t) for t in tokens[3:]], dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ParseError("values must be finite", path, lineno)
        records.append(_Record(lineno, int(tokens[0]), tokens[1], tokens[2], values))

    if header is None:
        header = (accepted[-1], FORMAT_VERSIONS[accepted[-1]])
    return FileHeader(header[0], header[1], meta), meta_lines, records


def _check_increasing(last, stream, rec, path):
    if stream in last and rec.timestamp <= last[stream]:
        raise UnsortedTimestampsError(
            f"stream {stream}: timestamp {rec.timestamp} does not follow {last[stream]}",
            path, rec.line)
    last[stream] = rec.timestamp


def _check_count(rec, counts, path):
    if len(rec.values) not in counts:
        expected = ' or '.join(str(c) for c in counts)
        raise ParseError(
            f"{rec.source} {rec.kind} needs {expected} values, got {len(rec.values)}",
            path, rec.line)


def _header_lines(name, metadata):
    lines = [f"#format {name} {FORMAT_VERSIONS[name]}"]
    for key in sorted(metadata):
        if not _KEY_RE.fullmatch(key):
            raise ConfigError(f"metadata key {key!r} is not a word")
        lines.append(f"#meta {key} {_meta_text(metadata[key])}".rstrip())
    return lines


def _meta_text(value):
    if isinstance(value, (ScreenModel, CameraIntrinsics)):
        return json.dumps(value.to_dict(), sort_keys=True, separators=(',', ':'))
    if isinstance(value, float):
        return _fmt(value)
    text = str(value)
    if '\n' in text or '\r' in text or text != text.strip():
        raise ConfigError(f"metadata value {text!r} must be a single trimmed line")
    return text


def _parse_meta(meta, meta_lines, path):
    parsed = {}
    for key, value in meta.items():
        with _schema(f"metadata {key}", path, meta_lines[key]):
            if key == 'screen':
                parsed[key] = ScreenModel.from_dict(json.loads(value))
            elif key == 'intrinsics':
                parsed[key] = CameraIntrinsics.from_dict(json.loads(value))
            elif key == 'distance_mm':
                if not _FLOAT_RE.fullmatch(value):
                    raise ValueError(f"not a number: {value!r}")
                parsed[key] = float(value)
            else:
                parsed[key] = value
    return parsed


def _record_line(t, source, kind, values):
    return ' '.join([str(int(t)), source, kind] + [_fmt(v) for v in np.ravel(values)])


def _landmark_values(lm):
    values = list(lm.points.ravel())
    if lm.has_iris:
        values += list(lm.iris_centers.ravel())
    return values


def _landmarks_from_values(t, values):
    iris = values[12:].reshape(2, 2) if len(values) == 16 else None
    return LandmarkSet(values[:12].reshape(6, 2), iris, t)


# ── Session logs ──

def dumps_session(log_):
    """Canonical text of a session: by time, then camera, click, sources A-Z."""
    log_.validate()
    sources = log_.sources
    entries = []
    for lm in log_.landmarks:
        entries.append((lm.timestamp, 0, _record_line(
            lm.timestamp, LANDMARK_SOURCE, 'landmarks', _landmark_values(lm))))
    for click in log_.clicks:
        entries.append((click.timestamp, 1, _record_line(
            click.timestamp, CLICK_SOURCE, 'target', click.target_px)))
    for rank, source in enumerate(sources, start=2):
        for rec in log_.estimates[source]:
            entries.append((rec.timestamp, rank, _record_line(
                rec.timestamp, source, rec.kind, rec.payload)))
    entries.sort(key=lambda e: (e[0], e[1]))
    lines = _header_lines(SESSION_FORMAT, log_.metadata) + [e[2] for e in entries]
    return '\n'.join(lines) + '\n'


def write_session(log_, path):
    atomic_write(path, dumps_session(log_))
    log.info(f"Wrote session ({len(log_.clicks)} clicks, {len(log_.landmarks)} frames) to {path}")


def loads_session(data, path=None):
    header, meta_lines, records = _split_document(data, path, [SESSION_FORMAT])
    session = SessionLog(metadata=_parse_meta(header.metadata, meta_lines, path))
    last = {}
    for rec in records:
        _check_increasing(last, rec.source, rec, path)
        with _schema(f"{rec.source} {rec.kind} record", path, rec.line):
            if rec.source == LANDMARK_SOURCE:
                if rec.kind != 'landmarks':
                    raise ParseError(f"camera records must be landmarks, got {rec.kind!r}",
                                     path, rec.line)
                _check_count(rec, (12, 16), path)
                session.landmarks.append(_landmarks_from_values(rec.timestamp, rec.values))
            elif rec.source == CLICK_SOURCE:
                if rec.kind != 'target':
                    raise ParseError(f"click records must be targets, got {rec.kind!r}",
                                     path, rec.line)
                _check_count(rec, (2,), path)
                session.clicks.append(ClickEvent(rec.timestamp, rec.values))
            elif rec.source == TRUTH_SOURCE:
                raise ParseError("ground-truth records belong in a truth file", path, rec.line)
            else:
                if rec.kind not in PAYLOAD_SIZES:
                    raise ParseError(f"unknown record kind {rec.kind!r}", path, rec.line)
                _check_count(rec, (PAYLOAD_SIZES[rec.kind],), path)
                stream = session.estimates.setdefault(rec.source, [])
                if stream and stream[0].kind != rec.kind:
                    raise SchemaError(f"source {rec.source} mixes {stream[0].kind} and "
                                      f"{rec.kind} records", path, rec.line)
                stream.append(make_record(rec.timestamp, rec.source, rec.kind, rec.values))
    return session


def parse_session(path):
    return loads_session(Path(path).read_bytes(), path)


# ── Replay files ──

def dumps_replay(streams):
    """Canonical replay text for {source_id: [EstimateRecord]}."""
    entries = []
    for rank, source in enumerate(sorted(streams)):
        for rec in streams[source]:
            entries.append((rec.timestamp, rank, _record_line(
                rec.timestamp, source, rec.kind, rec.payload)))
    entries.sort(key=lambda e: (e[0], e[1]))
    return '\n'.join(_header_lines(REPLAY_FORMAT, {}) + [e[2] for e in entries]) + '\n'


def write_replay(streams, path):
    atomic_write(path, dumps_replay(streams))


def loads_replay(data, path=None):
    """Estimate streams of a replay or session file, as {source_id: [EstimateRecord]}.

    The header is optional for replay files; landmark and click lines of a
    session file are skipped.
    """
    _, _, records = _split_document(data, path, [SESSION_FORMAT, REPLAY_FORMAT],
                                    header_required=False)
    streams = {}
    last = {}
    for rec in records:
        if rec.source in RESERVED_SOURCES:
            continue
        if rec.kind not in PAYLOAD_SIZES:
            raise ParseError(f"unknown record kind {rec.kind!r}", path, rec.line)
        _check_count(rec, (PAYLOAD_SIZES[rec.kind],), path)
        _check_increasing(last, rec.source, rec, path)
        with _schema(f"{rec.source} record", path, rec.line):
            streams.setdefault(rec.source, []).append(
                make_record(rec.timestamp, rec.source, rec.kind, rec.values))
    return streams


def parse_replay(path):
    return loads_replay(Path(path).read_bytes(), path)


# ── Ground truth ──

def dumps_ground_truth(samples, metadata=None):
    lines = _header_lines(TRUTH_FORMAT, metadata or {})
    last = None
    for s in samples:
        if last is not None and s.timestamp <= last:
            raise UnsortedTimestampsError(f"ground truth timestamp {s.timestamp} after {last}")
        last = s.timestamp
        t = s.timestamp
        lines.append(_record_line(t, TRUTH_SOURCE, 'target',
                                  np.concatenate([s.target_px, s.target_cam])))
        lines.append(_record_line(t, TRUTH_SOURCE, 'pose', np.concatenate(
            [s.head_pose.rotation.ravel(), s.head_pose.translation])))
        lines.append(_record_line(t, TRUTH_SOURCE, 'face', s.face_center))
        lines.append(_record_line(t, TRUTH_SOURCE, 'gaze',
                                  np.concatenate([s.gaze.origin, s.gaze.direction])))
        lines.append(_record_line(t, TRUTH_SOURCE, 'landmarks', _landmark_values(s.landmarks)))
        lines.append(_record_line(t, TRUTH_SOURCE, 'noise', s.noise))
    return '\n'.join(lines) + '\n'


def write_ground_truth(samples, path, metadata=None):
    atomic_write(path, dumps_ground_truth(samples, metadata))


def loads_ground_truth(data, path=None):
    """Ground-truth samples and metadata of a truth file."""
    from synthlab import GroundTruthSample

    header, meta_lines, records = _split_document(data, path, [TRUTH_FORMAT])
    metadata = _parse_meta(header.metadata, meta_lines, path)
    groups = {}
    order = []
    last = {}
    for rec in records:
        if rec.source != TRUTH_SOURCE:
            raise ParseError(f"unexpected source {rec.source!r} in a truth file", path, rec.line)
        if rec.kind not in TRUTH_KINDS:
            raise ParseError(f"unknown ground-truth kind {rec.kind!r}", path, rec.line)
        _check_count(rec, TRUTH_KINDS[rec.kind], path)
        _check_increasing(last, rec.kind, rec, path)
        if rec.timestamp not in groups:
            groups[rec.timestamp] = {}
            order.append(rec.timestamp)
        groups[rec.timestamp][rec.kind] = rec

    samples = []
    for t in order:
        group = groups[t]
        missing = [k for k in TRUTH_KINDS if k not in group]
        first_line = min(r.line for r in group.values())
        if missing:
            raise SchemaError(f"sample at t={t} lacks {', '.join(missing)}", path, first_line)
        with _schema(f"ground truth at t={t}", path, first_line):
            target = group['target'].values
            pose = group['pose'].values
            gaze = group['gaze'].values
            samples.append(GroundTruthSample(
                target_px=target[:2],
                target_cam=target[2:],
                head_pose=RigidTransform(pose[:9].reshape(3, 3), pose[9:]),
                face_center=group['face'].values,
                gaze=GazeSample(gaze[:3], gaze[3:], t),
                landmarks=_landmarks_from_values(t, group['landmarks'].values),
                noise=group['noise'].values,
                timestamp=t,
            ))
    return samples, metadata


def parse_ground_truth(path):
    return loads_ground_truth(Path(path).read_bytes(), path)


# ── JSON documents ──

def _dumps_json(doc, allow_nan=False):
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=allow_nan) + '\n'


def _loads_json(data, path, format_name):
    text = _decode(data, path)
    try:
        doc = json.loads(text)
    except (ValueError, RecursionError) as e:
        raise ParseError(f"invalid JSON: {e}", path) from None
    if not isinstance(doc, dict):
        raise SchemaError("top level must be a JSON object", path)
    if 'format' not in doc or 'version' not in doc:
        raise SchemaError("missing 'format' or 'version' field", path)
    if not isinstance(doc['format'], str):
        raise SchemaError("'format' must be a string", path)
    _check_version(doc['format'], doc['version'], path, accepted=[format_name])
    return doc


def _as_int(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise TypeError(f"{what} must be an integer, got {value!r}")
    return int(value)


def _as_float(value, what):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"{what} must be a number, got {value!r}")
    return float(value)


def _point_list(value, what):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{what} must be a list of [x, y] points")
    return arr


PROFILE_KEYS = {'format', 'version', 'coeffs', 'n_samples', 'rms_residual', 'created_at',
                'screen_size', 'input_bounds'}


def dumps_profile(profile):
    doc = dict(profile.extras)
    doc.update({
        'format': PROFILE_FORMAT,
        'version': FORMAT_VERSIONS[PROFILE_FORMAT],
        'coeffs': profile.coeffs.tolist(),
        'n_samples': int(profile.n_samples),
        'rms_residual': float(profile.rms_residual),
        'created_at': str(profile.created_at),
        'screen_size': list(profile.screen_size),
        'input_bounds': {'min': profile.input_min.tolist(), 'max': profile.input_max.tolist()},
    })
    return _dumps_json(doc)


def write_profile(profile, path):
    atomic_write(path, dumps_profile(profile))
    log.info(f"Wrote calibration profile ({profile.n_samples} samples) to {path}")


def loads_profile(data, path=None):
    from calibration import CalibrationProfile

    doc = _loads_json(data, path, PROFILE_FORMAT)
    with _schema("calibration profile", path):
        coeffs = np.array(doc['coeffs'], dtype=np.float64)
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")
        if not isinstance(doc['created_at'], str):
            raise TypeError("created_at must be a string")
        size = doc['screen_size']
        if not isinstance(size, list) or len(size) != 2:
            raise ValueError("screen_size must be [width_px, height_px]")
        bounds = doc['input_bounds']
        return CalibrationProfile(
            coeffs=coeffs,
            n_samples=_as_int(doc['n_samples'], 'n_samples'),
            rms_residual=_as_float(doc['rms_residual'], 'rms_residual'),
            created_at=doc['created_at'],
            screen_size=(_as_int(size[0], 'width_px'), _as_int(size[1], 'height_px')),
            input_min=np.array(bounds['min'], dtype=np.float64).reshape(2),
            input_max=np.array(bounds['max'], dtype=np.float64).reshape(2),
            extras={k: v for k, v in doc.items() if k not in PROFILE_KEYS},
        )


def parse_profile(path):
    return loads_profile(Path(path).read_bytes(), path)


SCREEN_KEYS = {'format', 'version', 'pose', 'width_mm', 'height_mm', 'width_px', 'height_px'}


def dumps_screen(screen, extras=None):
    doc = dict(extras or {})
    doc.update(screen.to_dict())
    doc.update({'format': SCREEN_FORMAT, 'version': FORMAT_VERSIONS[SCREEN_FORMAT]})
    return _dumps_json(doc)


def write_screen(screen, path, extras=None):
    atomic_write(path, dumps_screen(screen, extras))
    log.info(f"Wrote screen model to {path}")


def loads_screen(data, path=None, with_header=False):
    """Screen model from JSON; ``with_header`` also returns the FileHeader (unknown keys)."""
    doc = _loads_json(data, path, SCREEN_FORMAT)
    with _schema("screen model", path):
        pose = doc['pose']
        if not isinstance(pose, dict):
            raise TypeError("pose must be an object")
        screen = ScreenModel(
            RigidTransform(pose['rotation'], pose['translation'], False),
            _as_float(doc['width_mm'], 'width_mm'),
            _as_float(doc['height_mm'], 'height_mm'),
            _as_int(doc['width_px'], 'width_px'),
            _as_int(doc['height_px'], 'height_px'),
        )
    if with_header:
        extras = {k: v for k, v in doc.items() if k not in SCREEN_KEYS}
        return screen, FileHeader(doc['format'], doc['version'], extras)
    return screen


def parse_screen(path, with_header=False):
    return loads_screen(Path(path).read_bytes(), path, with_header)


class MirrorSet(NamedTuple):
    observations: list
    geometry: ScreenGeometry
    intrinsics: CameraIntrinsics


def dumps_mirror_observations(observations, geometry, cam):
    doc = {
        'format': MIRRORS_FORMAT,
        'version': FORMAT_VERSIONS[MIRRORS_FORMAT],
        'intrinsics': cam.to_dict(),
        'screen': {
            'width_mm': float(geometry.width_mm), 'height_mm': float(geometry.height_mm),
            'width_px': int(geometry.width_px), 'height_px': int(geometry.height_px),
        },
        'observations': [
            {'corners_px': obs.pattern_corners_px.tolist(),
             'pattern_px': obs.pattern_geometry.tolist()}
            for obs in observations
        ],
    }
    return _dumps_json(doc)


def write_mirror_observations(observations, geometry, cam, path):
    atomic_write(path, dumps_mirror_observations(observations, geometry, cam))
    log.info(f"Wrote {len(observations)} mirror observations to {path}")


def loads_mirror_observations(data, path=None):
    from calibration import MirrorObservation

    doc = _loads_json(data, path, MIRRORS_FORMAT)
    with _schema("mirror observations", path):
        screen = doc['screen']
        geometry = ScreenGeometry(
            _as_float(screen['width_mm'], 'width_mm'), _as_float(screen['height_mm'], 'height_mm'),
            _as_int(screen['width_px'], 'width_px'), _as_int(screen['height_px'], 'height_px'))
        cam = CameraIntrinsics.from_dict(doc['intrinsics'])
        if not isinstance(doc['observations'], list):
            raise TypeError("observations must be a list")
        observations = [
            MirrorObservation(_point_list(o['corners_px'], 'corners_px'),
                              _point_list(o['pattern_px'], 'pattern_px'))
            for o in doc['observations']
        ]
    return MirrorSet(observations, geometry, cam)


def parse_mirror_observations(path):
    return loads_mirror_observations(Path(path).read_bytes(), path)


# ── Configs ──

def _parse_scalar(token, path=None, line=None):
    if not token:
        raise ParseError("empty value", path, line)
    lowered = token.lower()
    if lowered in ('true', 'false'):
        return lowered == 'true'
    if _INT_RE.fullmatch(token):
        return int(token)
    if _FLOAT_RE.fullmatch(token):
        return float(token)
    m = _QUANTITY_RE.fullmatch(token)
    if m:
        unit = m.group(2)
        if unit not in UNITS:
            raise UnitError(f"unknown unit {unit!r} in {token!r} "
                            f"(known: {', '.join(UNITS)})", path, line)
        kind, factor = UNITS[unit]
        return Quantity(float(m.group(1)) * factor, kind)
    return token


def _parse_value(token, path=None, line=None):
    token = token.strip()
    if ',' in token:
        return [_parse_scalar(part.strip(), path, line) for part in token.split(',')]
    return _parse_scalar(token, path, line)


def _config_json_scalar(value, key, path):
    if isinstance(value, str):
        return _parse_value(value, path)
    if isinstance(value, (bool, int, float)) or value is None:
        return value
    raise SchemaError(f"config key {key!r}: values must be scalars or flat lists", path)


def _config_json_value(value, key, path):
    if isinstance(value, list):
        return [_config_json_scalar(v, key, path) for v in value]
    return _config_json_scalar(value, key, path)


def loads_config(data, path=None):
    """Config from ``key = value`` text or a flat JSON object.

    Values may carry unit suffixes (mm, cm, m, in, deg, us, ms, s), which are
    converted to Quantity values in mm, deg or us. Comma-separated values
    become lists.
    """
    text = _decode(data, path)
    if text.lstrip().startswith('{'):
        try:
            doc = json.loads(text)
        except (ValueError, RecursionError) as e:
            raise ParseError(f"invalid JSON: {e}", path) from None
        if not isinstance(doc, dict):
            raise SchemaError("config must be a JSON object", path)
        return {str(k): _config_json_value(v, k, path) for k, v in doc.items()}

    config = {}
    for lineno, raw in enumerate(text.split('\n'), start=1):
        line = re.sub(r'(^|\s)#.*$', '', raw).strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not _KEY_RE.fullmatch(key):
            raise ParseError("expected 'key = value'", path, lineno)
        if key in config:
            raise ParseError(f"duplicate key {key!r}", path, lineno)
        config[key] = _parse_value(value, path, lineno)
    return config


def parse_config(path):
    return loads_config(Path(path).read_bytes(), path)


def quantity_value(value, kind, key):
    """Numeric value of a config entry in the base unit of ``kind`` (mm, deg or us).

    Plain numbers are taken to be in the base unit already.
    """
    if isinstance(value, Quantity):
        if value.kind != kind:
            raise UnitError(f"{key} expects a {kind}, got a {value.kind}")
        return value.value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key} must be a number, got {value!r}")
    return float(value)


def parse_key_values(data, path=None):
    """Plain ``key = value`` (or ``key: value``) lines to a dict of strings."""
    text = _decode(data, path)
    values = {}
    for lineno, raw in enumerate(text.split('\n'), start=1):
        line = re.sub(r'(^|\s)#.*$', '', raw).strip()
        if not line:
            continue
        m = re.fullmatch(r'([A-Za-z_][A-Za-z0-9_]*)\s*[=:]\s*(.+)', line)
        if not m:
            raise ParseError("expected 'key = value'", path, lineno)
        values[m.group(1)] = m.group(2).strip()
    return values


# ── Result tables ──

# Fixed column order and dtype of every table the bench writes
TABLE_SCHEMAS = {
    'evaluation': [
        ('estimator', 'str'), ('condition', 'str'), ('participant_id', 'str'),
        ('distance_mm', 'float'), ('n_calibration', 'int'), ('n_test', 'int'),
        ('mean_deg', 'float'), ('std_deg', 'float'), ('matched', 'int'),
        ('dropped', 'int'), ('skipped', 'int'), ('extrapolated', 'int'),
    ],
    'samples': [
        ('timestamp_us', 'int'), ('error_deg', 'float'), ('extrapolated', 'int'),
    ],
    'distance': [
        ('distance_mm', 'float'), ('estimator', 'str'), ('condition', 'str'),
        ('n_calibration', 'int'), ('n_test', 'int'), ('n_trials', 'int'),
        ('mean_deg', 'float'), ('std_deg', 'float'),
    ],
    'calibration': [
        ('n_calibration', 'int'), ('estimator', 'str'), ('condition', 'str'),
        ('distance_mm', 'float'), ('n_test', 'int'), ('n_trials', 'int'),
        ('mean_deg', 'float'), ('std_deg', 'float'),
    ],
    'conditions': [
        ('condition', 'str'), ('estimator', 'str'), ('distance_mm', 'float'),
        ('n_calibration', 'int'), ('n_test', 'int'), ('n_trials', 'int'),
        ('mean_deg', 'float'), ('std_deg', 'float'), ('diff_pct', 'float'),
        ('p_value', 'float'),
    ],
}

_DTYPES = {'str': object, 'int': 'int64', 'float': 'float64'}


def _schema_of(name):
    if name not in TABLE_SCHEMAS:
        raise ConfigError(f"unknown table {name!r} (known: {', '.join(TABLE_SCHEMAS)})")
    return TABLE_SCHEMAS[name]


def conform_table(df, name):
    """Select and cast the columns of a table to its schema."""
    schema = _schema_of(name)
    columns = [c for c, _ in schema]
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ConfigError(f"table {name} lacks columns {', '.join(missing)}")
    return df[columns].astype({c: _DTYPES[t] for c, t in schema}).reset_index(drop=True)


def _table_format(path, fmt):
    fmt = fmt or Path(path).suffix.lstrip('.')
    if fmt not in ('csv', 'json', 'dat'):
        raise ConfigError(f"unknown table format {fmt!r}")
    return fmt


def dumps_table(df, name, fmt):
    df = conform_table(df, name)
    schema = _schema_of(name)
    columns = [c for c, _ in schema]
    if fmt == 'csv':
        return df.to_csv(index=False, float_format='%.17g', lineterminator='\n', na_rep='nan')
    if fmt == 'json':
        cast = {'str': str, 'int': int, 'float': float}
        rows = [[cast[t](v) for (_, t), v in zip(schema, row)]
                for row in df.itertuples(index=False, name=None)]
        return _dumps_json({
            'format': TABLE_FORMAT, 'version': FORMAT_VERSIONS[TABLE_FORMAT],
            'schema': name, 'columns': columns, 'rows': rows,
        }, allow_nan=True)
    # gnuplot data file
    lines = ['# ' + ' '.join(columns)]
    for row in df.itertuples(index=False, name=None):
        lines.append(' '.join(v if t == 'str' else _fmt(v) for (_, t), v in zip(schema, row)))
    return '\n'.join(lines) + '\n'


def write_table(df, path, name, fmt=None):
    fmt = _table_format(path, fmt)
    atomic_write(path, dumps_table(df, name, fmt))
    log.debug(f"wrote {name} table ({len(df)} rows) to {path}")
    return Path(path)


def loads_table(data, name, fmt, path=None):
    """Read a CSV or JSON table back into its schema dtypes."""
    schema = _schema_of(name)
    columns = [c for c, _ in schema]
    text = _decode(data, path)
    if fmt == 'csv':
        try:
            df = pd.read_csv(
                io.StringIO(text),
                dtype={c: str for c, t in schema if t == 'str'},
                keep_default_na=False,
                na_values={c: ['nan'] for c, t in schema if t == 'float'},
                float_precision='round_trip',
            )
        except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ParseError(f"invalid CSV: {e}", path) from None
        if list(df.columns) != columns:
            raise SchemaError(f"expected columns {columns}, got {list(df.columns)}", path)
    elif fmt == 'json':
        doc = _loads_json(data, path, TABLE_FORMAT)
        if doc.get('schema') != name or doc.get('columns') != columns:
            raise SchemaError(f"not a {name} table", path)
        with _schema(f"{name} table", path):
            df = pd.DataFrame(doc['rows'], columns=columns)
    else:
        raise ConfigError(f"cannot read {fmt} tables")
    with _schema(f"{name} table", path):
        return df.astype({c: _DTYPES[t] for c, t in schema})


def parse_table(path, name, fmt=None):
    fmt = _table_format(path, fmt)
    return loads_table(Path(path).read_bytes(), name, fmt, path)


# ── Debug patches ──

def write_patch(patch, path):
    """Write a normalized patch as PGM (grayscale) or PPM (3-channel)."""
    path = Path(path)
    img = np.clip(np.rint(np.asarray(patch, dtype=np.float64)), 0, 255).astype(np.uint8)
    ext = path.suffix.lower()
    if ext == '.pgm' and img.ndim != 2:
        raise ConfigError("PGM patches must be single-channel")
    if ext == '.ppm' and (img.ndim != 3 or img.shape[2] != 3):
        raise ConfigError("PPM patches must have three channels")
    if ext not in ('.pgm', '.ppm'):
        raise ConfigError(f"patches are written as .pgm or .ppm, not {ext!r}")
    ok, buf = cv2.imencode(ext, img)
    if not ok:
        raise OSError(f"could not encode patch for {path}")
    return atomic_write(path, buf.tobytes())
