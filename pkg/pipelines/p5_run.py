"""
Command-line entry point for the registration toolkit.

Subcommands:
    gen       synthesize a dataset of procedural shapes
    train     fit the feature network (--mode semi|unsupervised)
    register  align a source cloud file to a target cloud file
    bench     rotation | density | noise | overlap | category | timing | trace studies

Settings come from conf/config.yaml (or --config); flags given on the command
line override the file. Exit codes: 0 success, 2 usage / parse / config / I-O
error, 3 training failure, 4 solver failure.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from monitoring.performance_monitor import create_monitor
from pipelines.p0_generate import generate_dataset, load_dataset
from pipelines.p1_train import TrainConfig, train
from pipelines.p2_register import run_register
from pipelines.p3_bench import (
    DENSITY_KEEP_FRACTION, NOISE_SIGMAS, OVERLAP_CROPS, TIMING_SIZES, BenchProtocol, category_test,
    density_test, make_trial, noise_test, overlap_test, residual_trace, rotation_sweep, timing_report,
)
from utils.errors import (
    ConfigError, DegenerateCloud, FmrError, InvalidArgs, NonFiniteLoss, SingularNormalEquations,
)
from utils.geometry_utils.cloud import SHAPE_FAMILIES
from utils.network_utils.model import load_model, save_model
from utils.output_utils.OUTPUT_reports import write_csv
from utils.registration_utils.feature_metric import RegistrationConfig
from utils.registration_utils.icp import IcpConfig


CONFIG_VERSION = 1
DEFAULT_CONFIG = Path('conf/config.yaml')

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TRAINING = 3
EXIT_SOLVER = 4


# =========================
# Configuration document
# =========================
class PathsConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    data: str = 'data'
    models: str = 'outputs/models'
    reports: str = 'outputs/reports'
    performance_logs: str = 'performance_logs'


class CliConfig(BaseModel):
    """Versioned configuration document; unknown keys are rejected."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    config_version: int
    paths: PathsConfig = Field(default_factory=PathsConfig)
    registration: RegistrationConfig = Field(default_factory=RegistrationConfig)
    icp: IcpConfig = Field(default_factory=IcpConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    bench: BenchProtocol = Field(default_factory=BenchProtocol)


def load_cli_config(path=None) -> CliConfig:
    """Config file at `path` (or conf/config.yaml when present), else built-in defaults."""
    if path is None:
        if not DEFAULT_CONFIG.exists():
            return CliConfig(config_version=CONFIG_VERSION)
        path = DEFAULT_CONFIG
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f'cannot read config {path}: {e}') from e
    except yaml.YAMLError as e:
        raise ConfigError(f'config {path} is not valid YAML: {e}') from e
    if not isinstance(document, dict):
        raise ConfigError(f'config {path} must be a mapping')
    version = document.get('config_version')
    if version != CONFIG_VERSION:
        raise ConfigError(f'config {path} has config_version {version!r}, expected {CONFIG_VERSION}')
    try:
        return CliConfig(**document)
    except ValidationError as e:
        raise ConfigError(f'invalid config {path}:\n{e}') from e


def override(base: BaseModel, /, **flags) -> BaseModel:
    """Copy of a config model with every non-None flag applied (and re-validated)."""
    updates = {k: v for k, v in flags.items() if v is not None}
    if not updates:
        return base
    try:
        return type(base)(**{**base.model_dump(), **updates})
    except ValidationError as e:
        raise InvalidArgs(str(e)) from e


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}') from None


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}') from None


def _names(text: str) -> List[str]:
    return [x.strip() for x in text.split(',') if x.strip()]


# =========================
# Argument parser
# =========================
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog='fmr', description='Feature-metric point cloud registration toolkit',
                                     formatter_class=fmt)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None,
                        help=f'YAML config file (default: {DEFAULT_CONFIG} when present)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen', parents=[common], formatter_class=fmt, help='synthesize a shape dataset')
    p.add_argument('--families', type=_names, default=None,
                   help=f'comma-separated subset of {",".join(SHAPE_FAMILIES)} (config: training.families)')
    p.add_argument('--count', type=int, default=None, help='clouds per family (config: training.count_per_family)')
    p.add_argument('--points', type=int, default=None, help='points per cloud (config: training.cloud_size)')
    p.add_argument('--seed', type=int, default=None, help='seed (config: training.seed)')
    p.add_argument('--out', required=True, help='output directory')

    p = sub.add_parser('train', parents=[common], formatter_class=fmt, help='train the feature network')
    p.add_argument('data', help='dataset directory written by gen')
    p.add_argument('--mode', choices=['semi', 'unsupervised'], default=None, help='training mode (config: unsupervised)')
    p.add_argument('--epochs', type=int, default=None, help='epochs (config: 10)')
    p.add_argument('--lr', type=float, default=None, help='learning rate (config: 1e-3)')
    p.add_argument('--seed', type=int, default=None, help='seed (config: 0)')
    p.add_argument('--feature-dim', type=int, default=None, help='feature size K (config: 1024)')
    p.add_argument('--cloud-size', type=int, default=None, help='points per training cloud (config: 512)')
    p.add_argument('--val-fraction', type=float, default=None, help='validation share (config: 0.2)')
    p.add_argument('--out', default=None, help='output directory (config: paths.models)')

    p = sub.add_parser('register', parents=[common], formatter_class=fmt, help='register two cloud files')
    p.add_argument('--model', default=None, help='checkpoint (required for --method fmr)')
    p.add_argument('--source', required=True, help='source cloud Q (xyz, ply or off)')
    p.add_argument('--target', required=True, help='target cloud P (xyz, ply or off)')
    p.add_argument('--method', choices=['fmr', 'icp'], default='fmr')
    p.add_argument('--iters', type=int, default=None, help='iteration budget (config: 10)')
    p.add_argument('--xi', type=float, default=None, help='Jacobian finite-difference step (config: 0.02)')
    p.add_argument('--out', default=None, help='write the aligned source cloud here')

    p = sub.add_parser('bench', parents=[common], formatter_class=fmt, help='run a benchmark protocol')
    p.add_argument('protocol', choices=['rotation', 'density', 'noise', 'overlap', 'category', 'timing', 'trace'])
    p.add_argument('--model', default=None, help='semi-supervised checkpoint (method fmr)')
    p.add_argument('--model-unsup', default=None, help='unsupervised checkpoint (method fmr_unsup)')
    p.add_argument('--data', default=None, help='dataset directory (config: paths.data)')
    p.add_argument('--methods', type=_names, default=None, help='subset of fmr,fmr_unsup,icp')
    p.add_argument('--angles', type=_floats, default=None, help='init rotation bins in degrees (config: 0..80 step 10)')
    p.add_argument('--trials', type=int, default=None, help='trials per cell (config: 10)')
    p.add_argument('--trans-max', type=float, default=None, help='largest init translation (config: 0.8)')
    p.add_argument('--seed', type=int, default=None)
    p.add_argument('--rot-success', type=float, default=None, help='success threshold in degrees (config: 5)')
    p.add_argument('--trans-success', type=float, default=None, help='success threshold, translation (config: 0.05)')
    p.add_argument('--keep', type=float, default=DENSITY_KEEP_FRACTION, help='density: kept fraction')
    p.add_argument('--sigmas', type=_floats, default=list(NOISE_SIGMAS), help='noise: sigma values')
    p.add_argument('--crops', type=_floats, default=list(OVERLAP_CROPS), help='overlap: crop fractions')
    p.add_argument('--holdout', type=_names, default=None,
                   help='category: families unseen in training (config: training.holdout_families)')
    p.add_argument('--sizes', type=_ints, default=list(TIMING_SIZES), help='timing: point counts')
    p.add_argument('--angle', type=float, default=20.0, help='trace: init rotation in degrees')
    p.add_argument('--out', default=None, help='output directory (config: paths.reports)')
    return parser


# =========================
# Commands
# =========================
def cmd_gen(args, config: CliConfig) -> int:
    training = config.training
    families = args.families if args.families is not None else list(training.families)
    count = args.count if args.count is not None else training.count_per_family
    points = args.points if args.points is not None else training.cloud_size
    seed = args.seed if args.seed is not None else training.seed
    if count < 1 or points < 1:
        raise InvalidArgs(f'--count and --points must be >= 1 (got {count}, {points})')
    unknown = [f for f in families if f not in SHAPE_FAMILIES]
    if unknown or not families:
        raise InvalidArgs(f'unknown families {unknown}; choose from {",".join(SHAPE_FAMILIES)}')
    generate_dataset(args.out, families, count, points, seed)
    return EXIT_OK


def cmd_train(args, config: CliConfig) -> int:
    if not Path(args.data).is_dir():
        raise InvalidArgs(f'dataset directory not found: {args.data}')
    model_cfg = override(config.training.model, feature_dim=args.feature_dim)
    cfg = override(config.training, mode=args.mode, epochs=args.epochs, lr=args.lr, seed=args.seed,
                   cloud_size=args.cloud_size, val_fraction=args.val_fraction)
    cfg = override(cfg, model=model_cfg.model_dump())
    out = Path(args.out or config.paths.models)

    dataset = load_dataset(args.data)
    monitor = create_monitor('train', config.paths.performance_logs)
    best, report = train(cfg, dataset, monitor)

    extra = {'train_config': cfg.model_dump(mode='json')}
    save_model(best, out / 'model_best.fmr', {**extra, 'epoch': report.best_epoch})
    save_model(report.final_params, out / 'model_final.fmr', {**extra, 'epoch': cfg.epochs})
    report.write_csv(out / 'train_report.csv')
    monitor.update_summary_file()
    monitor.print_summary()
    print(f"  INFO: checkpoints and report written to {out}")
    return EXIT_OK


def cmd_register(args, config: CliConfig) -> int:
    if args.method == 'fmr' and not args.model:
        raise InvalidArgs('--method fmr requires --model')
    reg_cfg = override(config.registration, max_iterations=args.iters, perturbation_xi=args.xi)
    icp_cfg = override(config.icp, max_iterations=args.iters)
    run_register(args.source, args.target, args.method, args.model, reg_cfg, icp_cfg, args.out)
    return EXIT_OK


def _bench_models(args, methods: Sequence[str]):
    models = {}
    for method, path in (('fmr', args.model), ('fmr_unsup', args.model_unsup)):
        if method in methods:
            if not path:
                flag = '--model' if method == 'fmr' else '--model-unsup'
                raise InvalidArgs(f'method {method} requires {flag}')
            models[method] = load_model(path)
    return models


def cmd_bench(args, config: CliConfig) -> int:
    protocol = override(config.bench, init_rot_angles_deg=args.angles, trials_per_cell=args.trials,
                        init_trans_max=args.trans_max, seed=args.seed, methods=args.methods,
                        rot_success_deg=args.rot_success, trans_success=args.trans_success)
    out = Path(args.out or config.paths.reports)
    models = _bench_models(args, protocol.methods)

    if args.protocol == 'timing':
        methods = [m for m in protocol.methods if m != 'fmr_unsup']
        table = timing_report(models.get('fmr'), args.sizes, protocol.trials_per_cell, protocol.seed,
                              methods, config.registration, config.icp)
        write_csv(table, out / 'bench_timing.csv')
        print(f"  INFO: wrote {out / 'bench_timing.csv'}")
        return EXIT_OK

    dataset = load_dataset(args.data or config.paths.data)
    if args.protocol == 'trace':
        if 'fmr' not in models:
            raise InvalidArgs('trace needs --model')
        trial_protocol = override(protocol, init_rot_angles_deg=[args.angle])
        trial = make_trial(dataset, trial_protocol, 0, 0)
        table = residual_trace(models['fmr'], trial.target, trial.source, config.registration, trial.g_true)
        write_csv(table, out / 'bench_trace.csv')
        print(f"  INFO: wrote {out / 'bench_trace.csv'}")
        return EXIT_OK

    monitor = create_monitor('bench', config.paths.performance_logs)
    kwargs = dict(reg_cfg=config.registration, icp_cfg=config.icp, monitor=monitor)
    if args.protocol == 'rotation':
        table = rotation_sweep(models, dataset, protocol, **kwargs)
    elif args.protocol == 'density':
        table = density_test(models, dataset, protocol, keep_fraction=args.keep, **kwargs)
    elif args.protocol == 'noise':
        table = noise_test(models, dataset, protocol, sigmas=args.sigmas, **kwargs)
    elif args.protocol == 'category':
        holdout = args.holdout if args.holdout is not None else config.training.holdout_families
        if not holdout:
            raise InvalidArgs('category needs --holdout (or training.holdout_families in the config)')
        table = category_test(models, dataset, protocol, holdout, **kwargs)
    else:
        table = overlap_test(models, dataset, protocol, crops=args.crops, **kwargs)
    path = write_csv(table, out / f'bench_{args.protocol}.csv')
    monitor.update_summary_file()
    monitor.print_summary()
    print(f"  INFO: wrote {path} ({len(table)} rows)")
    return EXIT_OK


COMMANDS = {'gen': cmd_gen, 'train': cmd_train, 'register': cmd_register, 'bench': cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the pipeline runner."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_cli_config(args.config)
        return COMMANDS[args.command](args, config)
    except InvalidArgs as e:
        parser.print_usage(sys.stderr)
        print(f"  ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        print(f"  ERROR: training failed: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except (SingularNormalEquations, DegenerateCloud) as e:
        print(f"  ERROR: solver failed: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except (FmrError, ValueError, OSError) as e:
        print(f"  ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
