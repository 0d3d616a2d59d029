import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from tinyloc.config import RunConfig
from tinyloc.container import load_any_model, load_dataset, load_model, model_size, save_dataset, save_model
from tinyloc.distill import distill_then_quantize, distill_train, teacher_id
from tinyloc.harness import EvalReport, emit_report, evaluate_variant, run_experiment, warn_if_not_smaller
from tinyloc.helper_functions import AlreadyQuantizedError, ConfigError, ContainerFormatError, DataFormatError, \
    init_logging, thread_cap
from tinyloc.metrics import BUDGET_32K, BUDGET_64K, budget_check
from tinyloc.models import build_model, param_count
from tinyloc.quantize import quantize_model
from tinyloc.rssi_data import DatasetSplit, class_histogram, generate_synthetic, load_uji, prepare_inhome, \
    read_stream_csv, read_uji_csv
from tinyloc.training import as_tensors, train_model

USAGE_ERRORS = (ConfigError, DataFormatError, ContainerFormatError, AlreadyQuantizedError)
"""Failures caused by the invocation itself; these exit with status 2"""


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise ConfigError(f'No {what} given')
    if not Path(path).is_file():
        raise ConfigError(f'{what.capitalize()} {path} does not exist')
    return Path(path)


def _write_output(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding='utf-8')
        logging.info(f'Wrote {out}')
    else:
        print(text, end='')


def _print_summary(split: DatasetSplit) -> None:
    print(f'sequences: train {len(split.train)}, val {len(split.val)}, test {len(split.test)}; '
          f'K={split.class_count}, D={split.feature_dim}')
    for name, counts in class_histogram(split).items():
        print(f'{name}: ' + ', '.join(f'{cls}={n}' for cls, n in counts.items()))


def _load_split(args: argparse.Namespace) -> DatasetSplit:
    return load_dataset(_require_file(args.data, 'dataset file'))


#########################
# Verbs

def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    """Generate the synthetic dataset described by [data]"""
    split = generate_synthetic(config.synth_config())
    n_bytes = save_dataset(split, args.out)
    _print_summary(split)
    logging.info(f'Wrote {n_bytes} B dataset to {args.out}')
    return 0


def cmd_prepare_data(args: argparse.Namespace, config: RunConfig) -> int:
    """Build a dataset file from in-home streams, UJIIndoorLoc records, or the synthetic generator"""
    if args.uji or args.uji_validation:
        source = 'uji'
    elif args.fingerprint:
        source = 'inhome'
    else:
        source = config.data_source
    if source == 'uji':
        train_path = _require_file(args.uji or config.get('data', 'path'), 'UJI training file')
        validation_path = _require_file(args.uji_validation or config.get('data', 'validation_path'),
                                        'UJI validation file')
        split = load_uji(read_uji_csv(train_path), read_uji_csv(validation_path),
                         area_column=config.get('data', 'area_column'), seed=config.seed)
    elif source == 'inhome':
        fingerprint_paths = args.fingerprint or config.get_list('data', 'path')
        free_living_paths = args.free_living or config.get_list('data', 'free_living_path')
        if not fingerprint_paths or not free_living_paths:
            raise ConfigError('In-home data needs fingerprint and free-living stream files')
        label_column, timestamp_column = config.get('data', 'label_column'), config.get('data', 'timestamp_column')
        fingerprint, class_names = [], None
        for path in fingerprint_paths:
            stream, class_names = read_stream_csv(_require_file(path, 'fingerprint file'), label_column,
                                                  timestamp_column, class_names)
            fingerprint.append(stream)
        free_living = [read_stream_csv(_require_file(path, 'free-living file'), label_column, timestamp_column,
                                       class_names)[0] for path in free_living_paths]
        split = prepare_inhome(fingerprint, free_living, len(class_names), seed=config.seed,
                               class_names=class_names, **config.window_settings())
    else:
        split = generate_synthetic(config.synth_config())
    n_bytes = save_dataset(split, args.out)
    _print_summary(split)
    logging.info(f'Wrote {n_bytes} B dataset to {args.out}')
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    """Train the [model] on a dataset file and write its container"""
    split = _load_split(args)
    cfg = config.model_config(split.feature_dim, split.class_count)
    result = train_model(build_model(cfg, config.seed), split, config.train_config(), config.seed)
    n_bytes = save_model(result.model, args.out)
    print(f'{cfg.name}: val macro-F1 {result.best_val_f1:.4f} (epoch {result.best_epoch}), '
          f'{param_count(result.model)} params, {n_bytes} B')
    return 0


def cmd_quantize(args: argparse.Namespace, config: RunConfig) -> int:
    """Quantize a baseline container and print its size before and after"""
    quant_cfg = config.quant_config()
    calibration = None
    if quant_cfg.scheme == 'static':
        split = _load_split(args)
        model = load_any_model(_require_file(args.model, 'model file'), split.feature_dim)
        calibration = as_tensors(split.train)[0]
    else:
        model = load_model(_require_file(args.model, 'model file'))
    quantized = quantize_model(model, quant_cfg, calibration)
    print('before:\n' + model_size(model).render())
    print('after:\n' + model_size(quantized).render())
    warn_if_not_smaller(model, quantized)
    save_model(quantized, args.out)
    return 0


def cmd_distill(args: argparse.Namespace, config: RunConfig) -> int:
    """Distill the [model] student from a teacher container; --hybrid also writes its static-quantized sibling"""
    split = _load_split(args)
    teacher = load_any_model(_require_file(args.teacher, 'teacher model file'), split.feature_dim)
    student_cfg = config.model_config(split.feature_dim, split.class_count)
    kd_cfg = config.kd_config()
    if args.hybrid or config.get_bool('distill', 'hybrid'):
        result, quantized = distill_then_quantize(teacher, student_cfg, split, kd_cfg, config.quant_config(),
                                                  config.seed)
        out = Path(args.out)
        hybrid_out = out.with_name(f'{out.stem}-static{out.suffix}')
        save_model(quantized, hybrid_out)
        print(f'hybrid: {model_size(quantized).total_bytes} B -> {hybrid_out}')
    else:
        result = distill_train(teacher, student_cfg, split, kd_cfg, config.seed)
    save_model(result.model, args.out)
    print(f'{student_cfg.name}: val macro-F1 {result.best_val_f1:.4f}, teacher {teacher_id(teacher)}, '
          f'alpha {kd_cfg.alpha}')
    return 0


def _evaluate_file(path: str, split: DatasetSplit, dataset_id: str, seed: int) -> EvalReport:
    try:
        return evaluate_variant(load_any_model(path, split.feature_dim), split, dataset_id)
    except Exception as e:
        logging.error(f'Cannot evaluate {path}: {e}')
        return EvalReport(model=path, family='', hidden_size=0, layers=0, param_count=0, serialized_bytes=0,
                          variant='', macro_f1=None, accuracy=None, budget_64k=False, budget_32k=False, seed=seed,
                          dataset=dataset_id, error=str(e))


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    """Score existing containers on a dataset's test split and write them as a report grouped by budget class"""
    if not args.models:
        raise ConfigError('eval needs at least one model container')
    data_path = _require_file(args.data, 'dataset file')
    split = load_dataset(data_path)
    workers = min(thread_cap(), len(args.models))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda p: _evaluate_file(p, split, data_path.stem, config.seed), args.models))
    metadata = {'data': str(data_path), 'models': ', '.join(args.models), **config.echo()}
    _write_output(emit_report(rows, config.report_format, metadata), args.out)
    return 0


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    """Run the configured grid of models and variants and write the grouped results table"""
    data_path = _require_file(args.data, 'dataset file')
    experiment = config.experiment_config(data_path.stem)
    rows = run_experiment(experiment, load_dataset(data_path))
    _write_output(emit_report(rows, config.report_format, config.echo()), args.out)
    return 0 if all(r.error is None for r in rows) else 1


def cmd_size(args: argparse.Namespace, config: RunConfig) -> int:
    """Print a container's byte breakdown and its 64 KB / 32 KB verdicts"""
    breakdown = model_size(load_model(_require_file(args.model, 'model file')))
    print(breakdown.render())
    for label, limit in (('64 KB', BUDGET_64K), ('32 KB', BUDGET_32K)):
        print(f'{label}: {"pass" if budget_check(breakdown.total_bytes, limit) else "fail"}')
    return 0


#########################
# Argument handling

def _parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='INI configuration file')
    common.add_argument('--seed', type=int, help='Master seed, overriding the configuration')
    common.add_argument('-v', '--verbose', action='count', default=0,
                        help='Print logging messages; repeat for debug output')
    common.add_argument('--debug', action='store_true', help='Print debug logging messages')

    parser = argparse.ArgumentParser(prog='tinyloc', description='TinyML indoor localisation from RSSI sequences')
    verbs = parser.add_subparsers(dest='verb', required=True)

    synth = verbs.add_parser('synth', parents=[common], help='Generate the synthetic dataset')
    synth.add_argument('--out', required=True, help='Dataset file to write')
    synth.set_defaults(func=cmd_synth)

    prepare = verbs.add_parser('prepare-data', parents=[common], help='Build a dataset file from raw data')
    prepare.add_argument('--out', required=True, help='Dataset file to write')
    prepare.add_argument('--fingerprint', nargs='+', help='In-home fingerprint stream files')
    prepare.add_argument('--free-living', nargs='+', help='In-home free-living stream files')
    prepare.add_argument('--uji', help='UJIIndoorLoc training file')
    prepare.add_argument('--uji-validation', help='UJIIndoorLoc validation file')
    prepare.set_defaults(func=cmd_prepare_data)

    train = verbs.add_parser('train', parents=[common], help='Train the configured model')
    train.add_argument('--data', required=True, help='Dataset file')
    train.add_argument('--out', required=True, help='Model container to write')
    train.set_defaults(func=cmd_train)

    quantize = verbs.add_parser('quantize', parents=[common], help='Quantize a trained model')
    quantize.add_argument('model', help='Baseline model container')
    quantize.add_argument('--data', help='Dataset file supplying calibration sequences (static scheme)')
    quantize.add_argument('--out', required=True, help='Quantized container to write')
    quantize.add_argument('--scheme', choices=('static', 'dynamic'), help='Quantization scheme')
    quantize.add_argument('--tau', type=float, help='Outlier threshold for static quantization')
    quantize.set_defaults(func=cmd_quantize)

    distill = verbs.add_parser('distill', parents=[common], help='Distill the configured student from a teacher')
    distill.add_argument('--teacher', required=True, help='Teacher model container')
    distill.add_argument('--data', required=True, help='Dataset file')
    distill.add_argument('--out', required=True, help='Student container to write')
    distill.add_argument('--alpha', type=float, help='Weight of the CRF student loss (default 0.1)')
    distill.add_argument('--hybrid', action='store_true', help='Also write the static-quantized student')
    distill.add_argument('--tau', type=float, help='Outlier threshold for the hybrid quantization')
    distill.set_defaults(func=cmd_distill)

    for verb, func, description in (('eval', cmd_eval, 'Evaluate model containers'),
                                    ('report', cmd_report, 'Run the configured experiment grid')):
        sub = verbs.add_parser(verb, parents=[common], help=description)
        if verb == 'eval':
            sub.add_argument('models', nargs='*', help='Model containers')
        sub.add_argument('--data', required=True, help='Dataset file')
        sub.add_argument('--out', help='Report file to write; standard output when omitted')
        sub.add_argument('--format', choices=('csv', 'md'), help='Report format')
        sub.set_defaults(func=func)

    size = verbs.add_parser('size', parents=[common], help='Print a model container size breakdown')
    size.add_argument('model', help='Model container')
    size.set_defaults(func=cmd_size)
    return parser.parse_args(argv)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config.seed = args.seed
    for flag, section, key in (('scheme', 'quantize', 'scheme'), ('tau', 'quantize', 'tau'),
                               ('alpha', 'distill', 'alpha'), ('format', 'report', 'format')):
        value = getattr(args, flag, None)
        if value is not None:
            config.override(section, key, value)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Command line interface to tinyloc

    :param argv: command line arguments
    :return: 0 on success, 1 on runtime failure, 2 on usage or configuration error
    """
    args = _parse_args(argv)
    init_logging(2 if args.debug else args.verbose)
    try:
        config = _resolve_config(args)
        logging.debug(f'Resolved configuration: {config.echo()}')
        return args.func(args, config)
    except USAGE_ERRORS as e:
        print(f'tinyloc {args.verb}: {e}', file=sys.stderr)
        return 2
    except Exception as e:
        logging.debug('Unhandled failure', exc_info=True)
        print(f'tinyloc {args.verb} failed: {type(e).__name__}: {e}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
