"""
Command-line front end for the gaze geometry lab.

Usage:
    python gazelab.py simulate --config scene.cfg --out runs/s01 [--mirrors 5]
    python gazelab.py calibrate-screen runs/s01/mirrors.json --out runs/s01
    python gazelab.py calibrate-person runs/s01/session.log --estimator appearance --out runs/s01
    python gazelab.py evaluate runs/s01/session.log --estimator geometric --profile runs/s01/profile.json
    python gazelab.py sweep --config sweep.cfg --out results/ --format csv

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
Config and file formats are described in docs/formats.md.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import bench
from calibration import calibrate_screen_from_mirrors, fit_personal_calibration
from config import LOG_PATH, SUPPORTED_CONDITIONS, get_setting
from errors import ConfigError, DataError, GazeLabError, InsufficientDataError, NumericalError
from formats import (
    parse_config, parse_mirror_observations, parse_profile, parse_screen, parse_session,
    quantity_value, write_ground_truth, write_mirror_observations, write_profile, write_screen,
    write_session, write_table,
)
from synthlab import (
    SceneConfig, generate_session, mirror_planes, scene_config_from_mapping,
    simulate_mirror_observations,
)

log = logging.getLogger(__name__)

SWEEP_KINDS = ('distance', 'calibration', 'conditions')
# Keys of a sweep config that are not scene settings
SWEEP_KEYS = {
    'kind', 'estimator', 'trials', 'distances', 'counts', 'conditions', 'n_calibration',
    'n_test', 'aggregate', 'origin', 'workers', 'gnuplot',
}


def setup_logging(verbose=False):
    LOG_PATH.parent.mkdir(exist_ok=True)
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s [%(levelname)s] %(message)s',
        handlers=[
            logging.FileHandler(str(LOG_PATH), encoding='utf-8'),
            logging.StreamHandler(sys.stdout),
        ]
    )


def _scene_config(values, seed=None, ignore=()):
    cfg = scene_config_from_mapping(values, ignore) if values else SceneConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _load_session(args):
    log_ = parse_session(args.session)
    screen = parse_screen(args.screen) if args.screen else log_.screen
    if screen is None:
        raise ConfigError(f"{args.session} has no screen model; pass --screen")
    return log_, screen


def _prepare(args, log_, screen):
    sources = () if args.estimator == 'geometric' else (args.estimator,)
    estimator = bench.session_estimator(log_, args.estimator, screen=screen)
    return bench.prepare_session(log_, estimator, screen=screen, window_us=args.window_us,
                                 origin_mode=args.origin, sources=sources)


# ── Subcommands ──

def cmd_simulate(args):
    values = parse_config(args.config) if args.config else {}
    cfg = _scene_config(values, args.seed)
    log_, truth = generate_session(cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_session(log_, out / 'session.log')
    write_ground_truth(truth, out / 'truth.log', metadata={'seed': str(cfg.seed)})
    write_screen(log_.screen, out / 'screen.json')
    if args.mirrors:
        planes = mirror_planes(log_.screen, args.mirrors, seed=cfg.seed)
        observations = simulate_mirror_observations(
            log_.screen, planes, log_.intrinsics, noise_px=args.mirror_noise_px, seed=cfg.seed)
        write_mirror_observations(observations, log_.screen.geometry, log_.intrinsics,
                                  out / 'mirrors.json')
    print(f"Simulated {len(truth)} samples at {cfg.distance_mm:.0f} mm "
          f"({cfg.condition_tag}, seed {cfg.seed}) -> {out}")


def cmd_calibrate_screen(args):
    mirror_set = parse_mirror_observations(args.observations)
    screen = calibrate_screen_from_mirrors(mirror_set.observations, mirror_set.intrinsics,
                                           mirror_set.geometry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_screen(screen, out / 'screen.json',
                 extras={'n_mirrors': len(mirror_set.observations)})
    t = screen.pose.translation
    print(f"Screen origin at ({t[0]:.1f}, {t[1]:.1f}, {t[2]:.1f}) mm "
          f"from {len(mirror_set.observations)} mirrors -> {out / 'screen.json'}")


def cmd_calibrate_person(args):
    log_, screen = _load_session(args)
    n_cal = get_setting('n_calibration') if args.n_calibration is None else args.n_calibration
    prepared = _prepare(args, log_, screen)
    if len(prepared.samples) < n_cal:
        raise InsufficientDataError(
            f"calibration needs {n_cal} samples, only {len(prepared.samples)} usable")
    pairs = [(s.estimate_px, s.target_px) for s in prepared.samples[:n_cal]]
    profile = fit_personal_calibration(pairs, screen)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_profile(profile, out / 'profile.json')
    print(f"Fitted {args.estimator} profile on {n_cal} samples "
          f"(rms {profile.rms_residual:.2f} px) -> {out / 'profile.json'}")


def cmd_evaluate(args):
    log_, screen = _load_session(args)
    n_cal = get_setting('n_calibration') if args.n_calibration is None else args.n_calibration
    n_test = get_setting('n_test') if args.n_test is None else args.n_test
    profile = parse_profile(args.profile) if args.profile else None
    prepared = _prepare(args, log_, screen)
    result = bench.score(prepared, 0 if profile else n_cal, n_test, profile,
                         args.shuffle_split, args.seed)

    paths = bench.report([result], args.out, formats=(args.format,))
    samples_path = Path(args.out) / f"samples.{args.format}"
    paths.append(write_table(result.samples_table(), samples_path, 'samples', args.format))
    print(f"{result.metadata['estimator']}: {result.mean:.3f} ± {result.std:.3f} deg "
          f"over {result.n_test} test samples ({result.dropped} dropped, "
          f"{result.skipped} skipped)")
    return paths


def _config_int(value, key):
    if isinstance(value, bool) or not isinstance(value, (int, float)) \
            or not float(value).is_integer():
        raise ConfigError(f"{key} must be a whole number, got {value!r}")
    return int(value)


def _sweep_settings(values):
    def get(key, default=None):
        return values.get(key, default)

    kind = get('kind')
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"sweep kind must be one of {', '.join(SWEEP_KINDS)}, got {kind!r}")
    settings = {
        'estimator': str(get('estimator', 'geometric' if kind == 'distance' else 'appearance')),
        'trials': _config_int(get('trials', 5), 'trials'),
        'aggregate_mode': str(get('aggregate', 'per_session')),
        'origin_mode': str(get('origin', 'per_frame')),
        'workers': _config_int(get('workers', 1), 'workers'),
    }
    if settings['trials'] <= 0:
        raise ConfigError("trials must be positive")
    return kind, settings


def _as_list(value):
    return value if isinstance(value, list) else [value]


def cmd_sweep(args):
    if not args.config:
        raise ConfigError("sweep needs --config <sweep file>")
    values = parse_config(args.config)
    kind, settings = _sweep_settings(values)
    base = _scene_config(values, args.seed, ignore=SWEEP_KEYS)
    if args.workers:
        settings['workers'] = args.workers
    split = None
    if 'n_calibration' in values or 'n_test' in values:
        split = (_config_int(values.get('n_calibration', get_setting('n_calibration')),
                             'n_calibration'),
                 _config_int(values.get('n_test', get_setting('n_test')), 'n_test'))

    if kind == 'distance':
        distances = None
        if 'distances' in values:
            distances = [quantity_value(d, 'length', 'distances')
                         for d in _as_list(values['distances'])]
        table = bench.sweep_distance(distances, base=base, split=split, **settings)
        name = 'distance'
    elif kind == 'calibration':
        counts = None
        if 'counts' in values:
            counts = [_config_int(c, 'counts') for c in _as_list(values['counts'])]
        n_test = values.get('n_test')
        if n_test is not None:
            n_test = _config_int(n_test, 'n_test')
        table = bench.sweep_calibration_samples(counts, base=base,
                                                n_test=n_test, **settings)
        name = 'calibration'
    else:
        conditions = [str(c) for c in _as_list(values.get('conditions', ['indoor', 'outdoor']))]
        unknown = [c for c in conditions if c not in SUPPORTED_CONDITIONS]
        if unknown:
            raise ConfigError(f"unknown conditions {unknown} "
                              f"(choose from {', '.join(SUPPORTED_CONDITIONS)})")
        table = bench.compare_conditions(conditions, base=base, split=split, **settings)
        name = 'conditions'

    gnuplot = args.gnuplot or bool(values.get('gnuplot', False))
    paths = bench.report({name: table}, args.out, formats=(args.format,), gnuplot=gnuplot)
    print(table.to_string(index=False))
    return paths


# ── Entry point ──

def build_parser():
    parser = argparse.ArgumentParser(
        description='Gaze geometry lab: simulate, calibrate and benchmark gaze estimators')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    def out_arg(p):
        p.add_argument('--out', type=str, default='.', help='Output directory')

    def config_args(p):
        p.add_argument('--config', type=str, help='Scene or sweep config (key = value or JSON)')
        p.add_argument('--seed', type=int, help='Random seed (overrides the config)')

    def format_arg(p):
        p.add_argument('--format', choices=('csv', 'json'), default='csv',
                       help='Result table format')

    def session_args(p):
        p.add_argument('session', type=str, help='Session log file')
        p.add_argument('--estimator', default='geometric',
                       help="'geometric' or the id of a logged estimate stream")
        p.add_argument('--screen', type=str, help='Screen model JSON (default: from the session)')
        p.add_argument('--origin', choices=bench.ORIGIN_MODES, default='per_frame',
                       help='Gaze origin: per-frame or session-averaged face centre')
        p.add_argument('--n-calibration', type=int, help='Calibration samples')
        p.add_argument('--window-us', type=int, help='Click alignment window in microseconds')

    p = sub.add_parser('simulate', help='Generate a synthetic session')
    config_args(p)
    out_arg(p)
    p.add_argument('--mirrors', type=int, default=0, help='Also simulate K mirror observations')
    p.add_argument('--mirror-noise-px', type=float, default=0.0, help='Mirror corner noise')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('calibrate-screen', help='Screen pose from mirror observations')
    out_arg(p)
    p.add_argument('observations', type=str, help='Mirror observation JSON')
    p.set_defaults(func=cmd_calibrate_screen)

    p = sub.add_parser('calibrate-person', help='Fit a personal calibration profile')
    out_arg(p)
    session_args(p)
    p.set_defaults(func=cmd_calibrate_person)

    p = sub.add_parser('evaluate', help='Score an estimator on a session')
    out_arg(p)
    format_arg(p)
    session_args(p)
    p.add_argument('--n-test', type=int, help='Test samples')
    p.add_argument('--profile', type=str, help='Apply this profile instead of fitting one')
    p.add_argument('--shuffle-split', action='store_true', help='Seeded random split')
    p.add_argument('--seed', type=int, default=0, help='Seed of the shuffled split')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('sweep', help='Run a distance, calibration or condition sweep')
    config_args(p)
    out_arg(p)
    format_arg(p)
    p.add_argument('--workers', type=int, help='Worker processes')
    p.add_argument('--gnuplot', action='store_true', help='Also write .dat files')
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on usage errors
        return 1 if e.code == 2 else (e.code or 0)

    setup_logging(args.verbose)
    try:
        args.func(args)
    except NumericalError as e:
        log.error(f"Numerical failure: {e}")
        return 3
    except (DataError, GazeLabError, OSError) as e:
        log.error(f"{type(e).__name__}: {e}")
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
