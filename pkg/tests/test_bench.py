"""Tests for the experiment engine: alignment, scoring, statistics, sweeps and reports."""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from bench import (
    EvalResult, aggregate, align_to_clicks, compare_conditions, evaluate_session,
    prepare_session, report, results_table, score, session_estimator, sweep_calibration_samples,
    sweep_distance, welch_ttest,
)
from calibration import identity_profile
from config import SWEEP_CALIBRATION_COUNTS, SWEEP_DISTANCES_MM
from errors import ConfigError, InsufficientDataError
from formats import ClickEvent, SessionLog, dumps_table, parse_table
from geomcore import GazeSample, angular_error
from headpose import LandmarkSet
from synthlab import APPEARANCE_SOURCE, TRACKER_SOURCE, SceneConfig, generate_session

NOISY = SceneConfig(direction_noise_deg=3.0, direction_bias_deg=(2.0, 1.0))


def _result(errors, **kwargs):
    n = len(errors)
    return EvalResult(errors=errors, n_calibration=0, n_test=n,
                      metadata=kwargs.pop('metadata', {'estimator': 'appearance'}),
                      timestamps=np.arange(n), extrapolated_mask=np.zeros(n, dtype=bool),
                      **kwargs)


class ConstantEstimator:
    """Always looks straight back along the camera's optical axis."""

    name = 'constant'

    def estimate(self, inp):
        return GazeSample(inp.face_center, [0.0, 0.0, -1.0], inp.timestamp)


# ── Alignment ──

class TestAlignToClicks:

    @staticmethod
    def _log(frame_times, click_times):
        return SessionLog(
            landmarks=[LandmarkSet(np.zeros((6, 2)), timestamp=t) for t in frame_times],
            clicks=[ClickEvent(t, [100.0, 100.0]) for t in click_times])

    def test_exact_timestamp(self):
        result = align_to_clicks(self._log([0, 33333, 66666], [33333]), window_us=0)
        assert result.matched[0].landmarks.timestamp == 33333
        assert (result.dropped, result.total) == (0, 1)

    def test_window(self):
        session = self._log([0], [40000])
        assert len(align_to_clicks(session, window_us=100000).matched) == 1
        dropped = align_to_clicks(session, window_us=30000)
        assert dropped.matched == [] and dropped.dropped == 1
        assert dropped.diagnostics == {'no_landmarks': 1}

    def test_missing_source(self):
        result = align_to_clicks(self._log([0], [0]), sources=('cnn',))
        assert result.diagnostics == {'no_cnn': 1}

    def test_empty_streams(self):
        result = align_to_clicks(SessionLog())
        assert result.matched == [] and result.total == 0
        assert result.diagnostics == {'no_clicks': 1}

    def test_synthetic_session_has_no_drops(self):
        log_, _ = generate_session(SceneConfig(seed=1))
        result = align_to_clicks(log_, sources=(APPEARANCE_SOURCE, TRACKER_SOURCE))
        assert (len(result.matched), result.dropped) == (80, 0)

    def test_tracker_dropout_counted(self):
        log_, _ = generate_session(SceneConfig(tracker_dropout=0.3, seed=2))
        missing = 80 - len(log_.estimates[TRACKER_SOURCE])
        result = align_to_clicks(log_, window_us=10000, sources=(TRACKER_SOURCE,))
        assert missing > 0
        assert result.dropped == missing
        assert result.diagnostics == {'no_tracker': missing}


# ── Scoring ──

class TestEvaluateSession:

    @pytest.mark.parametrize('distance', SWEEP_DISTANCES_MM)
    def test_noiseless_geometric_pipeline(self, distance):
        log_, _ = generate_session(SceneConfig(distance_mm=distance, seed=3))
        result = evaluate_session(log_, 'geometric', split=(0, 80))
        assert result.mean < 1e-5
        assert (result.matched, result.skipped) == (80, 0)

    def test_direction_noise_after_calibration(self):
        cfg = SceneConfig(direction_noise_deg=3.0)
        means = [evaluate_session(generate_session(replace(cfg, seed=s))[0], 'appearance',
                                  split=(60, 20)).mean
                 for s in range(20)]
        assert 2.0 <= np.mean(means) <= 4.0

    def test_single_sample_calibration_is_worse_than_none(self):
        log_, _ = generate_session(replace(NOISY, seed=4))
        raw = evaluate_session(log_, 'appearance', split=(0, 20))
        one = evaluate_session(log_, 'appearance', split=(1, 20))
        assert one.mean > raw.mean

    def test_insufficient_samples(self):
        log_, _ = generate_session(SceneConfig(seed=5))
        with pytest.raises(InsufficientDataError) as exc:
            evaluate_session(log_, 'appearance', split=(70, 20))
        assert '70' in str(exc.value) and '20' in str(exc.value)

    def test_bad_split(self):
        log_, _ = generate_session(SceneConfig(n_samples=10, seed=5))
        with pytest.raises(ConfigError):
            evaluate_session(log_, 'appearance', split=(0, 0))

    def test_unknown_estimator(self):
        log_, _ = generate_session(SceneConfig(n_samples=10, seed=5))
        with pytest.raises(ConfigError):
            session_estimator(log_, 'cnn')

    def test_pixel_and_direction_streams_agree(self):
        log_, _ = generate_session(SceneConfig(seed=6))
        tracker = evaluate_session(log_, TRACKER_SOURCE, split=(0, 40))
        appearance = evaluate_session(log_, APPEARANCE_SOURCE, split=(0, 40))
        np.testing.assert_allclose(tracker.errors, appearance.errors, atol=1e-6)
        assert tracker.mean < 1e-6

    def test_any_estimator_can_be_scored(self):
        log_, truth = generate_session(SceneConfig(n_samples=30, seed=7))
        result = evaluate_session(log_, ConstantEstimator(), split=(0, 10))
        assert result.metadata['estimator'] == 'constant'
        expected = [angular_error([0.0, 0.0, -1.0], s.target_cam - s.face_center)
                    for s in truth[-10:]]
        np.testing.assert_allclose(result.errors, expected, atol=1e-6)

    def test_counts_add_up(self):
        log_, _ = generate_session(SceneConfig(tracker_dropout=0.3, seed=8))
        missing = 80 - len(log_.estimates[TRACKER_SOURCE])
        result = evaluate_session(log_, TRACKER_SOURCE, split=(0, 20))
        assert result.matched + result.dropped == 80
        assert result.dropped + result.skipped == missing

    def test_identity_profile_matches_raw(self):
        log_, _ = generate_session(replace(NOISY, seed=9))
        raw = evaluate_session(log_, 'appearance', split=(0, 20))
        same = evaluate_session(log_, 'appearance', split=(0, 20),
                                profile=identity_profile(log_.screen))
        np.testing.assert_allclose(same.errors, raw.errors, atol=1e-6)

    def test_shuffled_split_is_seeded(self):
        log_, _ = generate_session(replace(NOISY, seed=10))
        estimator = session_estimator(log_, 'appearance')
        prepared = prepare_session(log_, estimator, sources=('appearance',))
        plain = score(prepared, 10, 20)
        a = score(prepared, 10, 20, shuffle_split=True, seed=1)
        b = score(prepared, 10, 20, shuffle_split=True, seed=1)
        np.testing.assert_array_equal(plain.timestamps, np.arange(60, 80) * 33333)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)
        assert not np.array_equal(a.timestamps, plain.timestamps)

    def test_averaged_origin(self):
        log_, _ = generate_session(SceneConfig(n_samples=30, seed=11))
        result = evaluate_session(log_, 'geometric', split=(0, 20), origin_mode='averaged')
        assert result.mean < 1e-5
        with pytest.raises(ConfigError):
            evaluate_session(log_, 'geometric', split=(0, 20), origin_mode='median')


class TestEvalResult:

    def test_error_count_must_match_split(self):
        with pytest.raises(ConfigError):
            EvalResult([1.0, 2.0], 0, 3, {}, np.arange(2), np.zeros(2, dtype=bool))

    def test_negative_error(self):
        with pytest.raises(ConfigError):
            _result([1.0, -0.5])

    def test_statistics(self):
        r = _result([1.0, 2.0, 4.0])
        assert r.mean == pytest.approx(7 / 3)
        assert r.std == pytest.approx(np.sqrt(14 / 9))
        assert r.to_row()['n_test'] == 3
        assert list(r.samples_table().columns) == ['timestamp_us', 'error_deg', 'extrapolated']


# ── Aggregation and statistics ──

class TestAggregate:

    results = [_result([1.0, 1.0]), _result([3.0, 3.0, 3.0, 3.0])]

    def test_per_session(self):
        assert aggregate(self.results) == pytest.approx((2.0, 1.0))

    def test_pooled(self):
        assert aggregate(self.results, 'pooled') == pytest.approx((7 / 3, np.sqrt(8) / 3))

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            aggregate(self.results, 'median')

    def test_empty(self):
        with pytest.raises(InsufficientDataError):
            aggregate([])


class TestWelchTTest:

    @pytest.mark.parametrize('a, b, t, df', [
        ([1, 2, 3, 4], [2, 4, 6, 8], -np.sqrt(3), 75 / 17),
        ([1, 3], [2, 4, 6], -2 * np.sqrt(3 / 7), 49 / 17),
    ])
    def test_hand_computed(self, a, b, t, df):
        res = welch_ttest(a, b)
        assert res.statistic == pytest.approx(t, rel=1e-12)
        assert res.df == pytest.approx(df, rel=1e-12)
        assert res.p_value == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-9)

    def test_identical_groups(self):
        res = welch_ttest([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert res.statistic == pytest.approx(0.0)
        assert res.p_value == pytest.approx(1.0)

    def test_random_groups(self):
        rng = np.random.default_rng(70)
        for _ in range(20):
            a, b = rng.normal(0, 1, 15), rng.normal(0.3, 2, 9)
            res = welch_ttest(a, b)
            assert res.p_value == pytest.approx(2 * stats.t.sf(abs(res.statistic), res.df),
                                                rel=1e-9)

    def test_too_few_values(self):
        with pytest.raises(InsufficientDataError):
            welch_ttest([1.0], [1.0, 2.0])


# ── Sweeps ──

class TestSweepDistance:

    def test_pixel_noise_grows_with_distance(self):
        table = sweep_distance(estimator='geometric', trials=3, split=(0, 20),
                               base=SceneConfig(landmark_noise_px=1.0, iris_noise_px=1.0))
        assert list(table['distance_mm']) == SWEEP_DISTANCES_MM
        assert np.all(np.diff(table['mean_deg']) > 0)

    def test_direction_noise_is_distance_robust(self):
        table = sweep_distance(estimator='appearance', trials=5, split=(0, 20),
                               base=SceneConfig(direction_noise_deg=2.0))
        assert table['mean_deg'].max() - table['mean_deg'].min() < 0.5

    def test_noiseless_single_distance(self):
        table = sweep_distance([750.0], 'geometric', trials=2, split=(0, 20))
        assert len(table) == 1
        assert table['mean_deg'][0] < 1e-5
        assert table['n_trials'][0] == 2

    def test_seed_count_must_match_trials(self):
        with pytest.raises(ConfigError):
            sweep_distance([750.0], trials=2, seeds=[1, 2, 3])

    def test_worker_pool_gives_same_table(self):
        kwargs = dict(distances=[300.0, 750.0], estimator='appearance', trials=2,
                      split=(0, 20), base=SceneConfig(direction_noise_deg=2.0))
        pd.testing.assert_frame_equal(sweep_distance(**kwargs, workers=2),
                                      sweep_distance(**kwargs))


class TestSweepCalibrationSamples:

    @pytest.fixture(scope='class')
    def table(self):
        return sweep_calibration_samples(estimator='appearance', trials=20, base=NOISY)

    def test_default_counts(self, table):
        assert list(table['n_calibration']) == SWEEP_CALIBRATION_COUNTS

    def test_underdetermined_spike(self, table):
        err = dict(zip(table['n_calibration'], table['mean_deg']))
        assert err[1] > err[0]

    def test_error_decreases_with_more_samples(self, table):
        err = dict(zip(table['n_calibration'], table['mean_deg']))
        ladder = [n for n in SWEEP_CALIBRATION_COUNTS if n >= 2]
        for a, b in zip(ladder, ladder[1:]):
            assert err[b] <= err[a] + 0.2, f"error rises from n={a} to n={b}"
        assert err[60] < err[2]

    def test_error_non_increasing_at_10_20_60(self, table):
        err = dict(zip(table['n_calibration'], table['mean_deg']))
        assert err[10] >= err[20] >= err[60]

    def test_calibrated_error_near_raw_noise(self, table):
        err = dict(zip(table['n_calibration'], table['mean_deg']))
        # bias removed, per-sample noise left
        assert max(err[n] for n in (30, 40, 50, 60)) < err[0]

    def test_zero_count_equals_raw_error(self, table):
        raw = [evaluate_session(generate_session(replace(NOISY, seed=s))[0], 'appearance',
                                split=(0, 20)).mean
               for s in range(20)]
        assert table['mean_deg'][0] == pytest.approx(np.mean(raw), rel=1e-12)

    def test_counts_must_fit_session(self):
        with pytest.raises(InsufficientDataError):
            sweep_calibration_samples([70], trials=1, base=NOISY)


class TestCompareConditions:

    def test_outdoor_against_indoor(self):
        table = compare_conditions(trials=5, split=(0, 20),
                                   base=SceneConfig(direction_noise_deg=2.0))
        assert list(table['condition']) == ['indoor', 'outdoor']
        assert (table['diff_pct'][0], table['p_value'][0]) == (0.0, 1.0)
        assert table['diff_pct'][1] == pytest.approx(50.0, abs=1e-6)
        assert table['p_value'][1] < 0.05


# ── Reports ──

class TestReport:

    @pytest.fixture(scope='class')
    def results(self):
        log_, _ = generate_session(replace(NOISY, seed=12))
        return [evaluate_session(log_, 'appearance', split=(n, 20)) for n in (0, 30, 60)]

    def test_round_trip(self, results, tmp_path):
        paths = report(results, tmp_path)
        assert [p.name for p in paths] == ['evaluation.csv', 'evaluation.json']
        expected = results_table(results)
        for path in paths:
            pd.testing.assert_frame_equal(parse_table(path, 'evaluation'), expected)

    def test_named_tables_and_gnuplot(self, tmp_path):
        table = sweep_distance([750.0], 'appearance', trials=2, split=(0, 20))
        paths = report({'distance': table}, tmp_path, formats=('csv',), gnuplot=True)
        assert [p.name for p in paths] == ['distance.csv', 'distance.dat']

    def test_deterministic_bytes(self, results, tmp_path):
        a = report(results, tmp_path / 'a')
        b = report(results, tmp_path / 'b')
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes()

    def test_repeated_sweeps_identical(self):
        def run():
            table = sweep_distance([500.0], 'appearance', trials=2, split=(0, 20),
                                   base=SceneConfig(direction_noise_deg=1.0))
            return dumps_table(table, 'distance', 'csv')

        assert run() == run()

    def test_empty(self, tmp_path):
        with pytest.raises(InsufficientDataError):
            report([], tmp_path)
        with pytest.raises(InsufficientDataError):
            report({}, tmp_path)
