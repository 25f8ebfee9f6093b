#!/usr/bin/env python3
"""
V2M command-line entry point.

    check   run the property suites and report pass/fail per suite
    bench   time the sequential and parallel scans
    train   train a classifier and write metrics, checkpoint and config echo
    eval    evaluate a checkpoint on the held-out split

Exit status: 0 success, 1 suite or evaluation failure, 2 usage,
configuration or input-format error.
"""

import argparse
import csv
import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import List, Optional, Sequence, Tuple

import numpy as np

from bench import run_benchmark, write_bench_csv
from checkpoint import apply_checkpoint, load_checkpoint
from checks import SUITE_NAMES, run_suites
from config import DIRECTION_CODES, MODEL_PRESETS, Config, RunConfig, parse_directions, split_list
from data import LabeledSamples, generate_locality_dataset, load_idx, split_holdout
from model import count_parameters, estimate_flops, init_model, parameter_count_formula
from numerics import ConfigError, CountMismatchError, FormatError, V2MError
from train import CHECKPOINT_FILE, TrainSettings, evaluate, train_loop


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

CONFIG_ECHO_FILE = 'config.json'
ABLATION_FILE = 'ablation.csv'
EVAL_FILE = 'eval.csv'
CONFUSION_FILE = 'confusion.csv'
BENCH_FILE = 'bench.csv'


def setup_logging(out_dir: str, verbose: bool = False):
    """
    Configure the root logger: stderr plus a rotating file under <out_dir>/logs.

    Handlers installed by a previous call are replaced.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, 'v2m_owned', False):
            root.removeHandler(handler)
            handler.close()

    level = logging.DEBUG if verbose else getattr(logging, Config.LOG_LEVEL, logging.INFO)
    formatter = logging.Formatter(Config.LOG_FORMAT)

    log_dir = os.path.join(out_dir, 'logs')
    os.makedirs(log_dir, exist_ok=True)
    file_handler = RotatingFileHandler(os.path.join(log_dir, 'v2m.log'),
                                       maxBytes=Config.LOG_MAX_BYTES,
                                       backupCount=Config.LOG_BACKUP_COUNT)
    stream_handler = logging.StreamHandler(sys.stderr)
    for handler in (file_handler, stream_handler):
        handler.setFormatter(formatter)
        handler.setLevel(level)
        handler.v2m_owned = True
        root.addHandler(handler)
    root.setLevel(level)


# ---------------------------------------------------------------- data

def load_datasets(settings: RunConfig) -> Tuple[LabeledSamples, LabeledSamples]:
    """
    Training and held-out splits for the configured data source.

    Args:
        settings: resolved configuration

    Returns:
        (train, test)
    """
    if settings['data'] == 'synthetic':
        return generate_locality_dataset(settings.to_task_spec())
    if not settings['images'] or not settings['labels']:
        raise ConfigError("data source 'idx' needs both images and labels paths")
    for path in (settings['images'], settings['labels'], settings['test_images'], settings['test_labels']):
        if path and not os.path.exists(path):
            raise ConfigError(f"data file not found: {path}")
    samples = load_idx(settings['images'], settings['labels'])
    if settings['test_images'] or settings['test_labels']:
        if not (settings['test_images'] and settings['test_labels']):
            raise ConfigError("test_images and test_labels must be given together")
        return samples, load_idx(settings['test_images'], settings['test_labels'])
    return split_holdout(samples, settings['holdout_fraction'])


def _check_samples(settings: RunConfig, samples: LabeledSamples):
    _, h, w, c = samples.images.shape
    if h != settings['image_size'] or w != settings['image_size'] or c != settings['channels']:
        raise ConfigError(f"images are {h}x{w}x{c}, config expects "
                          f"{settings['image_size']}x{settings['image_size']}x{settings['channels']}")
    if len(samples) and samples.labels.max() >= settings['num_classes']:
        raise ConfigError(f"label {samples.labels.max()} exceeds num_classes {settings['num_classes']}")


def _train_settings(settings: RunConfig) -> TrainSettings:
    return TrainSettings(
        epochs=settings['epochs'],
        batch_size=settings['batch_size'],
        hparams=settings.to_optim_hparams(),
        warmup_epochs=settings['warmup_epochs'],
        seed=settings['seed'],
        augment_flip=settings['augment_flip'],
        prefetch=settings['prefetch'],
        config_echo=settings.echo(),
    )


def _direction_label(settings: RunConfig) -> str:
    return '+'.join(DIRECTION_CODES[k] for k in parse_directions(settings['directions']))


# ---------------------------------------------------------------- commands

def run_check(settings: RunConfig) -> int:
    """Run the configured suites; exit 1 if any fails."""
    results = run_suites(settings)
    for result in results:
        print(result.summary())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_FAILURE if failed else EXIT_OK


def run_bench(settings: RunConfig) -> int:
    """Benchmark the scans and write bench.csv to the output directory."""
    report = run_benchmark(settings['bench_lengths'], settings['bench_workers'],
                           settings['bench_repeats'], settings['bench_lanes'],
                           settings['precision'], settings['seed'])
    os.makedirs(settings['out_dir'], exist_ok=True)
    with open(os.path.join(settings['out_dir'], BENCH_FILE), 'w', newline='') as f:
        write_bench_csv(f, report.rows)
    write_bench_csv(sys.stdout, report.rows)
    for failure in report.failures:
        print(f"FAIL {failure}")
    return EXIT_OK if report.passed else EXIT_FAILURE


def _train_once(settings: RunConfig, out_dir: str):
    model_config = settings.to_model_config()
    train, test = load_datasets(settings)
    _check_samples(settings, train)
    _check_samples(settings, test)
    os.makedirs(out_dir, exist_ok=True)
    settings.save(os.path.join(out_dir, CONFIG_ECHO_FILE))
    logger.info(f"Model: {parameter_count_formula(model_config)} parameters, "
                f"{estimate_flops(model_config)} multiply-accumulates per image")
    return train_loop(model_config, train, test, _train_settings(settings), out_dir)


def run_train(settings: RunConfig) -> int:
    """
    Train and write metrics.csv, checkpoint.v2m and config.json.

    With `seeds` set, trains once per seed under <out>/seed_<s>/ and writes
    ablation.csv with the held-out accuracy of each seed and their mean.
    """
    out_dir = settings['out_dir']
    if not settings['seeds']:
        result = _train_once(settings, out_dir)
        print(f"final test accuracy {result.final_test_accuracy:.4f}, "
              f"best {result.best_accuracy:.4f} at epoch {result.best_epoch}")
        return EXIT_OK

    label = _direction_label(settings)
    accuracies = []
    for seed in settings['seeds']:
        per_seed = RunConfig(dict(settings.settings, seed=seed, seeds=[],
                                  out_dir=os.path.join(out_dir, f"seed_{seed}")))
        per_seed.validate()
        result = _train_once(per_seed, per_seed['out_dir'])
        accuracies.append((seed, result.best_accuracy))
        print(f"seed {seed}: best test accuracy {result.best_accuracy:.4f}")
    os.makedirs(out_dir, exist_ok=True)
    settings.save(os.path.join(out_dir, CONFIG_ECHO_FILE))
    mean = float(np.mean([acc for _, acc in accuracies]))
    with open(os.path.join(out_dir, ABLATION_FILE), 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['seed', 'directions', 'test_accuracy'])
        for seed, acc in accuracies:
            writer.writerow([seed, label, repr(acc)])
        writer.writerow(['mean', label, repr(mean)])
    print(f"{label}: mean test accuracy {mean:.4f} over {len(accuracies)} seeds")
    return EXIT_OK


def run_eval(settings: RunConfig, checkpoint_path: Optional[str] = None) -> int:
    """Evaluate a checkpoint; writes eval.csv and confusion.csv."""
    out_dir = settings['out_dir']
    checkpoint_path = checkpoint_path or os.path.join(out_dir, CHECKPOINT_FILE)
    if not os.path.exists(checkpoint_path):
        raise ConfigError(f"checkpoint not found: {checkpoint_path}")
    model_config = settings.to_model_config()
    params = init_model(model_config, settings['seed'])
    apply_checkpoint(load_checkpoint(checkpoint_path), params)
    _, test = load_datasets(settings)
    _check_samples(settings, test)
    report = evaluate(params, model_config, test, settings['batch_size'])

    metrics = [
        ('samples', report.count),
        ('loss', repr(report.loss)),
        ('accuracy', repr(report.accuracy)),
        (f"top{report.k}_accuracy", repr(report.top_k_accuracy)),
        ('parameters', count_parameters(params)),
        ('flops', estimate_flops(model_config)),
    ]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, EVAL_FILE), 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['metric', 'value'])
        writer.writerows(metrics)
    classes = report.confusion.shape[0]
    with open(os.path.join(out_dir, CONFUSION_FILE), 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['true'] + [f"pred_{j}" for j in range(classes)])
        for i in range(classes):
            writer.writerow([i] + report.confusion[i].tolist())

    for name, value in metrics:
        print(f"{name}: {value}")
    print('confusion (rows true, columns predicted):')
    for i in range(classes):
        print('  ' + ' '.join(f"{n:6d}" for n in report.confusion[i]))
    return EXIT_OK


# ---------------------------------------------------------------- arguments

def _seed_list(raw: str) -> List[int]:
    try:
        return [int(part) for part in split_list(raw)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got '{raw}'")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file')
    common.add_argument('--seed', type=int, help='master seed (unsigned 64-bit)')
    common.add_argument('--out', dest='out_dir', help='output directory')
    common.add_argument('--precision', choices=['f32', 'f64'])
    common.add_argument('--workers', type=int, help='scan lane workers')
    common.add_argument('-v', '--verbose', action='store_true', help='debug logging')

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument('--data', choices=['synthetic', 'idx'])
    model.add_argument('--images', help='IDX image file')
    model.add_argument('--labels', help='IDX label file')
    model.add_argument('--directions', type=split_list, help='subset of UL,LL,LR,UR')
    model.add_argument('--pipelines', type=split_list, help='subset of horizontal,vertical')
    model.add_argument('--cls-scheme', dest='cls_scheme', choices=['mean', 'edge', 'center'])
    model.add_argument('--mixer', choices=['2d', 'flatten'])
    model.add_argument('--preset', choices=sorted(MODEL_PRESETS), help='model size preset')

    parser = argparse.ArgumentParser(prog='v2m', description='V2M 2D selective state-space engine')
    sub = parser.add_subparsers(dest='command', required=True)

    check = sub.add_parser('check', parents=[common], help='run the property suites')
    check.add_argument('--suite', dest='suites', action='append', choices=SUITE_NAMES,
                       help='run only this suite (repeatable)')

    sub.add_parser('bench', parents=[common], help='benchmark the scans')

    train = sub.add_parser('train', parents=[common, model], help='train a classifier')
    train.add_argument('--epochs', type=int)
    train.add_argument('--seeds', type=_seed_list, help='comma-separated seeds for the ablation harness')

    evaluate_parser = sub.add_parser('eval', parents=[common, model], help='evaluate a checkpoint')
    evaluate_parser.add_argument('--checkpoint', help='checkpoint path (default <out>/checkpoint.v2m)')
    return parser


OVERRIDE_KEYS = ('seed', 'out_dir', 'precision', 'workers', 'data', 'images', 'labels', 'directions',
                 'pipelines', 'cls_scheme', 'mixer', 'preset', 'epochs', 'seeds', 'suites')


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    overrides = {key: getattr(args, key) for key in OVERRIDE_KEYS if getattr(args, key, None) is not None}
    try:
        settings = RunConfig.load(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(settings['out_dir'], args.verbose)
    logger.info(f"v2m {args.command} (seed {settings['seed']}, precision {settings['precision']})")
    try:
        if args.command == 'check':
            return run_check(settings)
        if args.command == 'bench':
            return run_bench(settings)
        if args.command == 'train':
            return run_train(settings)
        return run_eval(settings, args.checkpoint)
    except (ConfigError, FormatError, CountMismatchError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except V2MError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
