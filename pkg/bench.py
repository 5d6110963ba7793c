"""
Experiment engine: alignment, scoring, aggregation and the sweeps.

A session is scored in three steps. Clicks are aligned to the nearest
landmark frame and estimate records. Each matched frame then runs through
head pose, face centre, normalization and the estimator. Finally the
samples are split into a calibration head and a test tail; the tail is
scored by the angle between the (optionally calibrated) estimate ray and
the ray from the face centre to the clicked target.

Sweeps generate synthetic sessions per cell, optionally in a process pool;
results are keyed by cell, so the tables do not depend on completion order.
"""

import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy import stats

from calibration import apply_calibration_many, fit_personal_calibration
from config import SWEEP_CALIBRATION_COUNTS, SWEEP_DISTANCES_MM, get_setting
from errors import (
    BehindCameraError, ConfigError, DegenerateGeometryError, EstimatorUnavailableError,
    InsufficientDataError, NoIntersectionError, NoSolutionError, PoseFailureError,
)
from estimators import EstimatorInput, nearest_index
from estimators.geometric import GeometricEstimator
from estimators.replay import ReplayEstimator
from formats import conform_table, write_table
from geomcore import GazeSample, angular_error, default_intrinsics, intersect_ray_screen, \
    screen_px_to_camera_3d
from headpose import default_face_model, estimate_head_pose, face_center
from normalization import compute_normalization, default_normalization_params
from synthlab import SceneConfig, generate_session

log = logging.getLogger(__name__)

ORIGIN_MODES = ('per_frame', 'averaged')
AGGREGATE_MODES = ('per_session', 'pooled')

# Per-frame failures: the frame is skipped and counted
FRAME_ERRORS = (
    PoseFailureError, EstimatorUnavailableError, NoSolutionError, DegenerateGeometryError,
    BehindCameraError, NoIntersectionError,
)


# ── Types ──

@dataclass(frozen=True, eq=False)
class MatchedSample:
    click: object
    landmarks: object
    estimates: dict


class Alignment(NamedTuple):
    matched: list
    dropped: int
    total: int
    diagnostics: dict


@dataclass(frozen=True, eq=False)
class PreparedSample:
    timestamp: int
    target_px: np.ndarray
    face_center: np.ndarray
    gaze: GazeSample
    estimate_px: Optional[np.ndarray]


@dataclass(frozen=True, eq=False)
class PreparedSession:
    samples: list
    screen: object
    metadata: dict
    total: int
    dropped: int
    skipped: dict


@dataclass(frozen=True, eq=False)
class EvalResult:
    """Per-sample test errors (deg) of one session plus its bookkeeping."""

    errors: np.ndarray
    n_calibration: int
    n_test: int
    metadata: dict
    timestamps: np.ndarray
    extrapolated_mask: np.ndarray
    matched: int = 0
    dropped: int = 0
    skipped: int = 0

    def __post_init__(self):
        errors = np.asarray(self.errors, dtype=np.float64)
        if len(errors) != self.n_test:
            raise ConfigError(f"{len(errors)} errors for a {self.n_test}-sample test split")
        if np.any(errors < 0):
            raise ConfigError("angular errors cannot be negative")
        object.__setattr__(self, 'errors', errors)

    @property
    def mean(self):
        return float(np.mean(self.errors))

    @property
    def std(self):
        return float(np.std(self.errors))

    @property
    def extrapolated(self):
        return int(np.sum(self.extrapolated_mask))

    def to_row(self):
        return {
            'estimator': self.metadata.get('estimator', ''),
            'condition': self.metadata.get('condition_tag', ''),
            'participant_id': self.metadata.get('participant_id', ''),
            'distance_mm': float(self.metadata.get('distance_mm') or np.nan),
            'n_calibration': self.n_calibration,
            'n_test': self.n_test,
            'mean_deg': self.mean,
            'std_deg': self.std,
            'matched': self.matched,
            'dropped': self.dropped,
            'skipped': self.skipped,
            'extrapolated': self.extrapolated,
        }

    def samples_table(self):
        return conform_table(pd.DataFrame({
            'timestamp_us': self.timestamps,
            'error_deg': self.errors,
            'extrapolated': np.asarray(self.extrapolated_mask, dtype=np.int64),
        }), 'samples')


class WelchResult(NamedTuple):
    statistic: float
    df: float
    p_value: float


# ── Alignment ──

def align_to_clicks(log_, window_us=None, sources=()):
    """Match each click to the nearest landmark frame and estimate records.

    A click without a landmark frame, or without a record from any source in
    ``sources``, is dropped; the reasons are counted in ``diagnostics``.
    """
    window = get_setting('align_window_us') if window_us is None else int(window_us)
    lm_times = np.array([lm.timestamp for lm in log_.landmarks], dtype=np.int64)
    est_times = {s: np.array([r.timestamp for r in recs], dtype=np.int64)
                 for s, recs in log_.estimates.items()}

    matched = []
    diagnostics = Counter()
    for click in log_.clicks:
        i = nearest_index(lm_times, click.timestamp, window)
        if i is None:
            diagnostics['no_landmarks'] += 1
            continue
        estimates = {}
        for source, times in est_times.items():
            j = nearest_index(times, click.timestamp, window)
            if j is not None:
                estimates[source] = log_.estimates[source][j]
        lacking = [s for s in sources if s not in estimates]
        if lacking:
            diagnostics[f"no_{lacking[0]}"] += 1
            continue
        matched.append(MatchedSample(click, log_.landmarks[i], estimates))

    total = len(log_.clicks)
    if not total:
        diagnostics['no_clicks'] += 1
    log.info(f"Aligned {len(matched)}/{total} clicks (window ±{window} us)"
             + (f", dropped: {dict(diagnostics)}" if diagnostics else ""))
    return Alignment(matched, total - len(matched), total, dict(diagnostics))


# ── Scoring ──

def session_estimator(log_, name, model=None, cam=None, screen=None):
    """Estimator for a session by name: 'geometric' or the id of a logged source."""
    screen = screen or log_.screen
    if name == 'geometric':
        return GeometricEstimator(model, cam or log_.intrinsics, screen)
    if name in log_.estimates:
        return ReplayEstimator.from_records(log_.estimates[name], screen=screen,
                                            source_id=name, model=model)
    choices = ['geometric'] + log_.sources
    raise ConfigError(f"unknown estimator {name!r} for this session (choose from {', '.join(choices)})")


def _estimator_label(estimator):
    return getattr(estimator, 'source_id', None) or estimator.name


def prepare_session(log_, estimator, model=None, cam=None, screen=None, window_us=None,
                    origin_mode='per_frame', sources=(), norm_params=None):
    """Align a session and run every matched frame through the pipeline."""
    if origin_mode not in ORIGIN_MODES:
        raise ConfigError(f"origin mode must be one of {', '.join(ORIGIN_MODES)}")
    model = model or default_face_model()
    cam = cam or log_.intrinsics or default_intrinsics()
    screen = screen or log_.screen
    params = norm_params or default_normalization_params()

    alignment = align_to_clicks(log_, window_us, sources)
    skipped = Counter()
    posed = []
    for m in alignment.matched:
        try:
            pose = estimate_head_pose(m.landmarks, model, cam).pose
        except PoseFailureError as e:
            log.debug(f"t={m.click.timestamp}: {e}")
            skipped['PoseFailureError'] += 1
            continue
        posed.append((m, pose, face_center(pose, model)))

    if origin_mode == 'averaged' and posed:
        mean_center = np.mean([fc for _, _, fc in posed], axis=0)
        posed = [(m, pose, mean_center) for m, pose, _ in posed]

    samples = []
    for m, pose, fc in posed:
        try:
            frame = compute_normalization(fc, pose, cam, params)
            gaze = estimator.estimate(EstimatorInput(m.landmarks, pose, frame, face_center=fc))
            px = intersect_ray_screen(gaze, screen).px if screen is not None else None
        except FRAME_ERRORS as e:
            log.debug(f"t={m.click.timestamp}: skipped ({type(e).__name__}: {e})")
            skipped[type(e).__name__] += 1
            continue
        samples.append(PreparedSample(m.click.timestamp, m.click.target_px, fc, gaze, px))

    metadata = {
        'estimator': _estimator_label(estimator),
        'condition_tag': log_.condition_tag,
        'participant_id': log_.participant_id,
        'distance_mm': log_.distance_mm,
        'origin_mode': origin_mode,
    }
    if skipped:
        log.info(f"Skipped {sum(skipped.values())} frames: {dict(skipped)}")
    return PreparedSession(samples, screen, metadata, alignment.total, alignment.dropped,
                           dict(skipped))


def _direction_to(px, origin, screen):
    return screen_px_to_camera_3d(px, screen).xyz - origin


def score(prepared, n_cal, n_test, profile=None, shuffle_split=False, seed=0):
    """Score the test tail of a prepared session, calibrating on its head.

    With ``n_cal = 0`` and no profile the raw estimator directions are scored.
    A given ``profile`` is applied as is instead of fitting one.
    """
    n_cal, n_test = int(n_cal), int(n_test)
    samples = prepared.samples
    n = len(samples)
    if n_cal < 0 or n_test <= 0:
        raise ConfigError(f"split needs n_cal >= 0 and n_test > 0, got ({n_cal}, {n_test})")
    if n_cal + n_test > n:
        raise InsufficientDataError(
            f"split needs {n_cal} calibration + {n_test} test samples, only {n} usable "
            f"({prepared.dropped} dropped, {sum(prepared.skipped.values())} skipped)")
    screen = prepared.screen
    if screen is None:
        raise ConfigError("scoring needs a screen model")

    order = np.arange(n)
    if shuffle_split:
        order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,))).permutation(n)
    calibration = [samples[i] for i in order[:n_cal]]
    test = [samples[i] for i in order[n - n_test:]]
    truth = [_direction_to(s.target_px, s.face_center, screen) for s in test]

    if profile is None and n_cal == 0:
        errors = [angular_error(s.gaze.direction, t) for s, t in zip(test, truth)]
        outside = np.zeros(n_test, dtype=bool)
    else:
        if profile is None:
            pairs = [(s.estimate_px, s.target_px) for s in calibration]
            profile = fit_personal_calibration(pairs, screen)
        corrected, outside = apply_calibration_many(profile, [s.estimate_px for s in test])
        errors = [angular_error(_direction_to(c, s.face_center, screen), t)
                  for c, s, t in zip(corrected, test, truth)]

    result = EvalResult(
        errors=np.array(errors), n_calibration=n_cal, n_test=n_test,
        metadata=dict(prepared.metadata),
        timestamps=np.array([s.timestamp for s in test], dtype=np.int64),
        extrapolated_mask=np.asarray(outside, dtype=bool),
        matched=prepared.total - prepared.dropped, dropped=prepared.dropped,
        skipped=sum(prepared.skipped.values()))
    log.debug(f"{result.metadata['estimator']} n_cal={n_cal}: mean {result.mean:.3f} deg")
    return result


def evaluate_session(log_, estimator, split=None, screen=None, model=None, cam=None,
                     window_us=None, origin_mode='per_frame', profile=None,
                     shuffle_split=False, seed=0):
    """Prepare and score one session; ``estimator`` is an instance or a name."""
    n_cal, n_test = split or (get_setting('n_calibration'), get_setting('n_test'))
    sources = ()
    if isinstance(estimator, str):
        if estimator != 'geometric':
            sources = (estimator,)
        estimator = session_estimator(log_, estimator, model, cam, screen)
    prepared = prepare_session(log_, estimator, model, cam, screen, window_us,
                               origin_mode, sources)
    result = score(prepared, n_cal, n_test, profile, shuffle_split, seed)
    log.info(f"{result.metadata['estimator']} ({n_cal}/{n_test}): "
             f"{result.mean:.3f} ± {result.std:.3f} deg")
    return result


# ── Aggregation and statistics ──

def aggregate(results, mode='per_session'):
    """(mean, std) over sessions: mean of per-session means, or pooled over samples."""
    if not results:
        raise InsufficientDataError("nothing to aggregate")
    if mode == 'per_session':
        means = np.array([r.mean for r in results])
        return float(np.mean(means)), float(np.std(means))
    if mode == 'pooled':
        pooled = np.concatenate([r.errors for r in results])
        return float(np.mean(pooled)), float(np.std(pooled))
    raise ConfigError(f"aggregate mode must be one of {', '.join(AGGREGATE_MODES)}")


def welch_ttest(a, b):
    """Two-sided Welch t-test (unequal variances)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientDataError("the t-test needs at least two values per group")
    res = stats.ttest_ind(a, b, equal_var=False)
    va = np.var(a, ddof=1) / len(a)
    vb = np.var(b, ddof=1) / len(b)
    denom = va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1)
    df = (va + vb) ** 2 / denom if denom > 0 else np.nan
    return WelchResult(float(res.statistic), float(df), float(res.pvalue))


def results_table(results):
    """The 'evaluation' table of a list of EvalResults."""
    if not results:
        raise InsufficientDataError("no results to tabulate")
    return conform_table(pd.DataFrame([r.to_row() for r in results]), 'evaluation')


# ── Sweeps ──

class _Cell(NamedTuple):
    key: tuple
    cfg: SceneConfig
    estimator: str
    splits: tuple
    model: object
    origin_mode: str


def _run_cell(cell):
    """Generate one session and score it for every split; runs in a worker."""
    log_, _ = generate_session(cell.cfg, cell.model)
    sources = () if cell.estimator == 'geometric' else (cell.estimator,)
    estimator = session_estimator(log_, cell.estimator, cell.model)
    prepared = prepare_session(log_, estimator, cell.model, origin_mode=cell.origin_mode,
                               sources=sources)
    return cell.key, [score(prepared, n_cal, n_test) for n_cal, n_test in cell.splits]


def _run_cells(cells, workers=1):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = pool.map(_run_cell, cells)
            return dict(outputs)
    return dict(_run_cell(c) for c in cells)


def _seeds(base, trials, seeds):
    if seeds is None:
        return [base.seed + k for k in range(trials)]
    if len(seeds) != trials:
        raise ConfigError(f"{trials} trials but {len(seeds)} seeds")
    return list(seeds)


def sweep_distance(distances=None, estimator='geometric', trials=5, seeds=None, base=None,
                   split=None, model=None, aggregate_mode='per_session',
                   origin_mode='per_frame', workers=1):
    """Mean/std error per distance; trial k uses the same seed at every distance."""
    distances = list(distances or SWEEP_DISTANCES_MM)
    base = base or SceneConfig()
    split = tuple(split or (get_setting('n_calibration'), get_setting('n_test')))
    model = model or default_face_model()
    seeds = _seeds(base, trials, seeds)

    cells = [_Cell((d, k), replace(base, distance_mm=float(d), seed=s), estimator, (split,),
                   model, origin_mode)
             for d in distances for k, s in enumerate(seeds)]
    results = _run_cells(cells, workers)

    rows = []
    for d in sorted(distances):
        mean, std = aggregate([results[d, k][0] for k in range(trials)], aggregate_mode)
        rows.append({'distance_mm': float(d), 'estimator': estimator,
                     'condition': base.condition_tag, 'n_calibration': split[0],
                     'n_test': split[1], 'n_trials': trials, 'mean_deg': mean, 'std_deg': std})
        log.info(f"distance {d:.0f} mm, {estimator}: {mean:.3f} ± {std:.3f} deg")
    return conform_table(pd.DataFrame(rows), 'distance')


def sweep_calibration_samples(counts=None, estimator='appearance', trials=20, seeds=None,
                              base=None, n_test=None, model=None,
                              aggregate_mode='per_session', origin_mode='per_frame',
                              workers=1):
    """Mean/std error per calibration-sample count; each session is prepared once."""
    counts = list(SWEEP_CALIBRATION_COUNTS if counts is None else counts)
    base = base or SceneConfig()
    n_test = n_test or get_setting('n_test')
    if max(counts) + n_test > base.n_samples:
        raise InsufficientDataError(
            f"{max(counts)} calibration + {n_test} test samples exceed the "
            f"{base.n_samples}-sample session")
    model = model or default_face_model()
    seeds = _seeds(base, trials, seeds)
    splits = tuple((int(c), n_test) for c in counts)

    cells = [_Cell((k,), replace(base, seed=s), estimator, splits, model, origin_mode)
             for k, s in enumerate(seeds)]
    results = _run_cells(cells, workers)

    rows = []
    for i, c in enumerate(counts):
        mean, std = aggregate([results[(k,)][i] for k in range(trials)], aggregate_mode)
        rows.append({'n_calibration': int(c), 'estimator': estimator,
                     'condition': base.condition_tag, 'distance_mm': float(base.distance_mm),
                     'n_test': n_test, 'n_trials': trials, 'mean_deg': mean, 'std_deg': std})
        log.info(f"n_cal={c}, {estimator}: {mean:.3f} ± {std:.3f} deg")
    return conform_table(pd.DataFrame(rows), 'calibration')


def compare_conditions(conditions=('indoor', 'outdoor'), estimator='appearance', trials=10,
                       seeds=None, base=None, split=None, model=None,
                       aggregate_mode='per_session', origin_mode='per_frame', workers=1):
    """Per-condition error on the same seeds, relative to the first condition.

    ``diff_pct`` is the change of the mean against the first (baseline)
    condition and ``p_value`` a Welch t-test on the pooled per-sample errors.
    """
    conditions = list(conditions)
    base = base or SceneConfig()
    split = tuple(split or (get_setting('n_calibration'), get_setting('n_test')))
    model = model or default_face_model()
    seeds = _seeds(base, trials, seeds)

    cells = [_Cell((c, k), replace(base, condition_tag=c, seed=s), estimator, (split,),
                   model, origin_mode)
             for c in conditions for k, s in enumerate(seeds)]
    results = _run_cells(cells, workers)

    def cell_results(c):
        return [results[c, k][0] for k in range(trials)]

    baseline = cell_results(conditions[0])
    base_mean, _ = aggregate(baseline, aggregate_mode)
    base_errors = np.concatenate([r.errors for r in baseline])
    rows = []
    for c in conditions:
        runs = cell_results(c)
        mean, std = aggregate(runs, aggregate_mode)
        if c == conditions[0]:
            diff, p = 0.0, 1.0
        else:
            diff = 100.0 * (mean - base_mean) / base_mean if base_mean > 0 else np.nan
            p = welch_ttest(np.concatenate([r.errors for r in runs]), base_errors).p_value
        rows.append({'condition': c, 'estimator': estimator,
                     'distance_mm': float(base.distance_mm), 'n_calibration': split[0],
                     'n_test': split[1], 'n_trials': trials, 'mean_deg': mean,
                     'std_deg': std, 'diff_pct': diff, 'p_value': p})
        log.info(f"{c}, {estimator}: {mean:.3f} ± {std:.3f} deg ({diff:+.1f}%)")
    return conform_table(pd.DataFrame(rows), 'conditions')


# ── Reporting ──

def report(results, out_dir, formats=('csv', 'json'), gnuplot=False):
    """Write result tables to ``out_dir``; returns the written paths.

    ``results`` maps table names to DataFrames, or is a list of EvalResults
    (written as the 'evaluation' table).
    """
    if isinstance(results, (list, tuple)):
        tables = {'evaluation': results_table(list(results))}
    else:
        tables = dict(results or {})
    if not tables:
        raise InsufficientDataError("nothing to report")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffixes = list(formats) + (['dat'] if gnuplot else [])
    paths = []
    for name in sorted(tables):
        for fmt in suffixes:
            paths.append(write_table(tables[name], out_dir / f"{name}.{fmt}", name, fmt))
    log.info(f"Wrote {len(paths)} files to {out_dir}")
    return paths
