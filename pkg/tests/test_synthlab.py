"""Tests for the synthetic lab: scene config, session generation, mirror scenes."""

from dataclasses import replace

import numpy as np
import pytest

from config import SWEEP_DISTANCES_MM
from errors import ConfigError, DegenerateGeometryError
from formats import dumps_session, loads_config
from geomcore import (
    MirrorPlane, ScreenModel, RigidTransform, angular_error, normalize, screen_px_to_camera_3d,
)
from headpose import face_center, reproject
from synthlab import (
    APPEARANCE_SOURCE, TRACKER_SOURCE, SceneConfig, condition_noise, generate_session,
    mirror_planes, perturb_direction, reflect_scene, region_size_mm, region_visual_angle_deg,
    scene_config_from_mapping, screen_for_distance,
)


# ── SceneConfig ──

class TestSceneConfig:

    def test_defaults(self):
        cfg = SceneConfig()
        assert cfg.n_samples == 80
        assert cfg.frame_step_us == 33333
        assert (cfg.region_width_deg, cfg.region_height_deg) == (34.5, 19.8)

    @pytest.mark.parametrize('kwargs', [
        {'distance_mm': 0.0},
        {'n_samples': 0},
        {'landmark_noise_px': -1.0},
        {'condition_tag': 'underwater'},
        {'tracker_dropout': 1.5},
        {'region_width_mm': 300.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SceneConfig(**kwargs)

    def test_from_config_text(self):
        values = loads_config("# far session\ndistance = 110cm\nregion_width = 30deg\n"
                              "region_height = 20deg\nlandmark_noise_px = 1\n"
                              "direction_bias = 1deg, -0.5deg\ncondition = outdoor\nseed = 7\n")
        cfg = scene_config_from_mapping(values)
        assert cfg.distance_mm == pytest.approx(1100.0)
        assert cfg.region_width_deg == 30.0
        assert cfg.landmark_noise_px == 1.0
        assert cfg.direction_bias_deg == (1.0, -0.5)
        assert cfg.condition_tag == 'outdoor'
        assert cfg.seed == 7

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            scene_config_from_mapping({'brightness': 3})

    def test_condition_surrogates(self):
        base = SceneConfig(landmark_noise_px=1.0, iris_noise_px=1.0, direction_noise_deg=2.0,
                           tracker_dropout=0.1)
        outdoor = condition_noise(replace(base, condition_tag='outdoor'))
        glasses = condition_noise(replace(base, condition_tag='glasses'))
        assert outdoor.landmark_px == pytest.approx(1.5)
        assert outdoor.tracker_dropout == pytest.approx(0.3)
        assert glasses.iris_px == pytest.approx(2.0)
        assert glasses.landmark_bias_px == pytest.approx(2.0)
        assert condition_noise(base).landmark_bias_px == 0.0


# ── Region geometry ──

class TestRegion:

    def test_constant_visual_angle(self):
        for d in SWEEP_DISTANCES_MM:
            w, h = region_size_mm(SceneConfig(distance_mm=d))
            assert region_visual_angle_deg(w, d) == pytest.approx(34.5, rel=1e-12)
            assert region_visual_angle_deg(h, d) == pytest.approx(19.8, rel=1e-12)

    def test_screen_grows_with_distance(self):
        widths = [screen_for_distance(d).width_mm for d in SWEEP_DISTANCES_MM]
        assert widths == sorted(widths)
        w, _ = region_size_mm(SceneConfig(distance_mm=750.0))
        assert w <= screen_for_distance(750.0).width_mm <= 1.2 * w

    def test_region_larger_than_screen(self):
        small = ScreenModel(RigidTransform(np.eye(3), [-100, 10, 0]), 200.0, 120.0, 800, 480)
        with pytest.raises(ConfigError):
            generate_session(SceneConfig(distance_mm=750.0), screen=small)


# ── generate_session ──

class TestGenerateSession:

    def test_determinism(self):
        cfg = SceneConfig(landmark_noise_px=1.0, iris_noise_px=0.5, direction_noise_deg=2.0,
                          seed=42)
        a, _ = generate_session(cfg)
        b, _ = generate_session(cfg)
        assert dumps_session(a) == dumps_session(b)
        c, _ = generate_session(replace(cfg, seed=43))
        assert dumps_session(a) != dumps_session(c)

    def test_streams_are_aligned(self):
        log_, truth = generate_session(SceneConfig(seed=1))
        assert len(log_.landmarks) == len(log_.clicks) == len(truth) == 80
        times = [c.timestamp for c in log_.clicks]
        assert times == [i * 33333 for i in range(80)]
        assert [lm.timestamp for lm in log_.landmarks] == times
        assert log_.metadata['seed'] == '1'
        assert log_.distance_mm == 750.0

    def test_ground_truth_invariants(self, model, cam):
        cfg = SceneConfig(landmark_noise_px=1.0, iris_noise_px=1.0, seed=2)
        log_, truth = generate_session(cfg, model, cam)
        for s in truth:
            np.testing.assert_array_equal(
                s.gaze.direction, normalize(s.target_cam - s.face_center))
            np.testing.assert_allclose(face_center(s.head_pose, model), s.face_center, atol=1e-12)
            np.testing.assert_allclose(
                s.landmarks.points, reproject(model, s.head_pose, cam) + s.noise[:12].reshape(6, 2),
                atol=1e-9)
            np.testing.assert_allclose(
                s.target_cam, screen_px_to_camera_3d(s.target_px, log_.screen).xyz, atol=1e-12)

    def test_face_at_configured_distance(self):
        for d in (300.0, 1800.0):
            log_, truth = generate_session(SceneConfig(distance_mm=d, seed=3))
            screen = log_.screen
            centre = screen_px_to_camera_3d(screen.center_px, screen).xyz
            for s in truth:
                assert screen.normal @ (s.face_center - centre) == pytest.approx(d, rel=1e-9)

    def test_targets_inside_region(self):
        cfg = SceneConfig(seed=4)
        log_, truth = generate_session(cfg)
        w, h = np.array(region_size_mm(cfg)) / log_.screen.mm_per_px
        offsets = np.abs(np.array([s.target_px for s in truth]) - log_.screen.center_px)
        assert np.all(offsets <= [w / 2 + 1e-9, h / 2 + 1e-9])

    def test_noiseless_appearance_matches_truth(self):
        log_, truth = generate_session(SceneConfig(seed=5))
        for rec, s in zip(log_.estimates[APPEARANCE_SOURCE], truth):
            assert angular_error(rec.payload, s.gaze.direction) < 1e-9

    def test_direction_noise_is_rms(self):
        cfg = SceneConfig(direction_noise_deg=3.0, n_samples=800, seed=6)
        log_, truth = generate_session(cfg)
        errors = np.array([angular_error(rec.payload, s.gaze.direction)
                           for rec, s in zip(log_.estimates[APPEARANCE_SOURCE], truth)])
        assert 2.7 < np.sqrt(np.mean(errors ** 2)) < 3.3

    def test_direction_bias(self):
        cfg = SceneConfig(direction_bias_deg=(2.0, 1.0), seed=7)
        log_, truth = generate_session(cfg)
        for rec, s in zip(log_.estimates[APPEARANCE_SOURCE], truth):
            assert angular_error(rec.payload, s.gaze.direction) == pytest.approx(
                np.hypot(2.0, 1.0), abs=1e-9)

    def test_tracker_operating_range(self):
        near, _ = generate_session(SceneConfig(distance_mm=750.0, seed=8))
        far, _ = generate_session(SceneConfig(distance_mm=1100.0, seed=8))
        assert len(near.estimates[TRACKER_SOURCE]) == 80
        assert TRACKER_SOURCE not in far.estimates

    def test_outdoor_drops_more_tracker_samples(self):
        cfg = SceneConfig(tracker_dropout=0.2, seed=9)
        indoor, _ = generate_session(cfg)
        outdoor, _ = generate_session(replace(cfg, condition_tag='outdoor'))
        assert len(outdoor.estimates[TRACKER_SOURCE]) < len(indoor.estimates[TRACKER_SOURCE])

    def test_random_sampling(self):
        log_, _ = generate_session(SceneConfig(target_sampling='random', seed=10))
        assert len(log_.clicks) == 80


# ── Mirror scenes ──

class TestReflectScene:

    def test_axis_aligned(self, screen):
        plane = MirrorPlane([0.0, 0.0, 400.0], [0.0, 0.0, -1.0])
        virtual = reflect_scene(screen, plane)
        assert virtual.pose.mirrored
        t = screen.pose.translation
        np.testing.assert_allclose(virtual.pose.translation, [t[0], t[1], 800.0 - t[2]],
                                   atol=1e-12)

    def test_double_reflection(self, screen):
        plane = mirror_planes(screen, 3)[2]
        twice = reflect_scene(reflect_scene(screen, plane), plane)
        np.testing.assert_allclose(twice.pose.rotation, screen.pose.rotation, atol=1e-12)
        np.testing.assert_allclose(twice.pose.translation, screen.pose.translation, atol=1e-12)
        assert not twice.pose.mirrored

    def test_camera_on_plane(self, screen):
        with pytest.raises(DegenerateGeometryError):
            reflect_scene(screen, ([100.0, 0.0, 0.0], [0.0, 0.0, 1.0]))

    def test_mirror_planes_are_distinct(self, screen):
        planes = mirror_planes(screen, 5)
        for i, a in enumerate(planes):
            for b in planes[i + 1:]:
                assert angular_error(a.normal, b.normal) > 5.0


class TestPerturbDirection:

    def test_angle_is_hypot(self):
        g = normalize([0.2, -0.1, -1.0])
        out = perturb_direction(g, 3.0, 4.0)
        assert angular_error(g, out) == pytest.approx(5.0, abs=1e-9)
