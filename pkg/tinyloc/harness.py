from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from tinyloc.container import SizeBreakdown, model_size
from tinyloc.distill import KDConfig, distill_train, select_teacher
from tinyloc.helper_functions import ConfigError, ShapeError, TinyLocError, ceil_kb
from tinyloc.metrics import BUDGET_32K, BUDGET_64K, accuracy, budget_check, macro_f1
from tinyloc.models import EmissionModel, ModelConfig, build_model, param_count
from tinyloc.quantize import QuantConfig, quantize_model
from tinyloc.rssi_data import DatasetSplit
from tinyloc.training import TrainConfig, as_tensors, evaluate, train_model

__all__ = ['BUDGET_32K', 'BUDGET_64K', 'BUDGET_CLASSES', 'VARIANTS', 'EvalReport', 'ExperimentConfig',
           'SizeBreakdown', 'accuracy', 'budget_check', 'budget_class', 'default_synthetic_sweep', 'emit_report',
           'evaluate_variant', 'macro_f1', 'model_size', 'run_experiment', 'warn_if_not_smaller']

VARIANTS = ('baseline', 'static_quant', 'dynamic_quant', 'distill', 'distill_static_quant')
BUDGET_CLASSES = ('Under 64 KB', 'Under 32 KB', 'Over 64 KB', 'Not sized')
"""Report group order"""
REPORT_FORMATS = ('md', 'csv')
METRICS_NOTE = ('Metrics are per timestep over the test split. Sizes are serialized container bytes rounded up to '
                'whole KB (1 KB = 1024 B); * marks sizes over 64 KB.')


@dataclass
class EvalReport:
    """One evaluated (model, compression variant) pair"""
    model: str
    family: str
    hidden_size: int
    layers: int
    param_count: int
    serialized_bytes: int
    variant: str
    macro_f1: Optional[float]
    accuracy: Optional[float]
    budget_64k: bool
    budget_32k: bool
    seed: Optional[int]
    dataset: str
    teacher: Optional[str] = None
    alpha: Optional[float] = None
    tau: Optional[float] = None
    error: Optional[str] = None


def budget_class(n_bytes: int) -> str:
    """Report group for a serialized size"""
    if budget_check(n_bytes, BUDGET_32K):
        return 'Under 32 KB'
    if budget_check(n_bytes, BUDGET_64K):
        return 'Under 64 KB'
    return 'Over 64 KB'


def warn_if_not_smaller(baseline: EmissionModel, compressed: EmissionModel) -> bool:
    """Log a warning when compression did not shrink the serialized model; returns whether it did"""
    before, after = model_size(baseline).total_bytes, model_size(compressed).total_bytes
    if after >= before:
        logging.warning(f'{compressed.config.name} {compressed.compression.get("variant")} is {after} B, not smaller '
                        f'than the {before} B baseline: quantization parameters outweigh the payload savings')
        return False
    return True


def evaluate_variant(model: EmissionModel, split: DatasetSplit, dataset_id: str = 'dataset') -> EvalReport:
    """Score model on the test split and account its serialized size

    :param model: baseline or compressed model; its compression record names the variant
    :param split: dataset with a non-empty test split
    :param dataset_id: label for the report row
    :return: the report row
    """
    if not split.test:
        raise ValueError('Test split is empty')
    cfg = model.config
    if (cfg.input_dim, cfg.class_count) != (split.feature_dim, split.class_count):
        raise ShapeError(f'{cfg.name} expects D={cfg.input_dim}, K={cfg.class_count}; dataset has '
                         f'D={split.feature_dim}, K={split.class_count}')
    f1, acc = evaluate(model, split.test, split.class_count)
    n_bytes = model_size(model).total_bytes
    compression = getattr(model, 'compression', {'variant': 'baseline'})
    return EvalReport(model=cfg.name, family=cfg.family, hidden_size=cfg.hidden_size, layers=cfg.layer_count,
                      param_count=param_count(model), serialized_bytes=n_bytes,
                      variant=compression.get('variant', 'baseline'), macro_f1=f1, accuracy=acc,
                      budget_64k=budget_check(n_bytes, BUDGET_64K), budget_32k=budget_check(n_bytes, BUDGET_32K),
                      seed=model.seed, dataset=dataset_id, teacher=compression.get('teacher'),
                      alpha=compression.get('alpha'), tau=compression.get('tau'))


#########################
# Experiment orchestration

@dataclass(frozen=True)
class ExperimentConfig:
    """A grid of model names crossed with compression variants, all driven by one seed

    Model names take the form 'mamba:H8L1' or 'mdcsa:H16L3'; input and class dims come from the dataset.
    teacher_models lists distillation teacher candidates (defaults to the model grid itself).
    """
    models: Tuple[str, ...] = ('mamba:H8L1',)
    variants: Tuple[str, ...] = ('baseline', 'static_quant', 'dynamic_quant')
    seed: int = 7
    dataset_id: str = 'synthetic'
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    teacher_models: Tuple[str, ...] = ()
    model_overrides: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.models:
            raise ConfigError('Experiment needs at least one model')
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown or not self.variants:
            raise ConfigError(f'Unknown compression variants {unknown}, expected a subset of {VARIANTS}')
        for name in self.models + self.teacher_models:
            try:
                ModelConfig.parse_name(name, 1, 2, **self.model_overrides)
            except (TypeError, ValueError) as e:
                raise ConfigError(f'Invalid model "{name}": {e}') from e


def default_synthetic_sweep() -> ExperimentConfig:
    """The desk-scale grid: Mamba H4/H8/H16 L1 and H16L2, MDCSA H8L1 and H16L1, with both quantizations"""
    return ExperimentConfig(models=('mamba:H4L1', 'mamba:H8L1', 'mamba:H16L1', 'mamba:H16L2', 'mdcsa:H8L1',
                                    'mdcsa:H16L1'))


class _ExperimentRun:
    """Caches trained baselines and students across the rows of one experiment"""

    def __init__(self, experiment: ExperimentConfig, dataset: DatasetSplit):
        self.experiment = experiment
        self.dataset = dataset
        self.baselines: Dict[str, EmissionModel] = {}
        self.students: Dict[str, EmissionModel] = {}
        self._calibration = None

    def config(self, name: str) -> ModelConfig:
        return ModelConfig.parse_name(name, self.dataset.feature_dim, self.dataset.class_count,
                                      **self.experiment.model_overrides)

    def calibration(self):
        if self._calibration is None:
            self._calibration = as_tensors(self.dataset.train)[0]
        return self._calibration

    def baseline(self, name: str) -> EmissionModel:
        cfg = self.config(name)
        if cfg.name not in self.baselines:
            logging.info(f'Training baseline {cfg.name}')
            model = build_model(cfg, self.experiment.seed)
            self.baselines[cfg.name] = train_model(model, self.dataset, self.experiment.train,
                                                   self.experiment.seed).model
        return self.baselines[cfg.name]

    def teacher_for(self, name: str) -> EmissionModel:
        cfg = self.config(name)
        candidates = [n for n in (self.experiment.teacher_models or self.experiment.models)
                      if self.config(n).family == cfg.family and self.config(n).name != cfg.name]
        if not candidates:
            raise ConfigError(f'No {cfg.family} teacher candidate for {cfg.name}')
        return select_teacher([self.baseline(n) for n in candidates], self.dataset)

    def student(self, name: str) -> EmissionModel:
        cfg = self.config(name)
        if cfg.name not in self.students:
            teacher = self.teacher_for(name)
            self.students[cfg.name] = distill_train(teacher, cfg, self.dataset, self.experiment.kd,
                                                    self.experiment.seed).model
        return self.students[cfg.name]

    def variant(self, name: str, variant: str) -> EmissionModel:
        static = replace(self.experiment.quant, scheme='static')
        if variant == 'baseline':
            return self.baseline(name)
        if variant == 'static_quant':
            model = quantize_model(self.baseline(name), static, self.calibration())
            warn_if_not_smaller(self.baseline(name), model)
            return model
        if variant == 'dynamic_quant':
            return quantize_model(self.baseline(name), replace(self.experiment.quant, scheme='dynamic'))
        if variant == 'distill':
            return self.student(name)
        model = quantize_model(self.student(name), static, self.calibration())
        warn_if_not_smaller(self.student(name), model)
        return model

    def row(self, name: str, variant: str) -> EvalReport:
        try:
            return evaluate_variant(self.variant(name, variant), self.dataset, self.experiment.dataset_id)
        except (TinyLocError, ValueError, RuntimeError) as e:
            logging.error(f'{name} {variant} failed: {e}')
            try:
                cfg = self.config(name)
                label, family, hidden, layers = cfg.name, cfg.family, cfg.hidden_size, cfg.layer_count
            except ValueError:
                label, family, hidden, layers = name, '', 0, 0
            return EvalReport(model=label, family=family, hidden_size=hidden, layers=layers, param_count=0,
                              serialized_bytes=0, variant=variant, macro_f1=None, accuracy=None,
                              budget_64k=False, budget_32k=False, seed=self.experiment.seed,
                              dataset=self.experiment.dataset_id, error=str(e))


def run_experiment(experiment: ExperimentConfig, dataset: DatasetSplit) -> List[EvalReport]:
    """Train, compress and evaluate every (model, variant) pair of the grid

    A failing row is recorded with its error text and the run continues.

    :param experiment: model grid, variants and seed
    :param dataset: prepared dataset
    :return: one report row per (model, variant), in grid order
    """
    run = _ExperimentRun(experiment, dataset)
    return [run.row(name, variant) for name in experiment.models for variant in experiment.variants]


#########################
# Report emission

def _percent(value: Optional[float]) -> str:
    return f'{100 * value:.2f}'


def _size_cell(row: EvalReport) -> str:
    return f'{ceil_kb(row.serialized_bytes)}{"" if row.budget_64k else "*"}'


def _report_table(rows: Sequence[EvalReport]) -> Tuple[List[str], List[Tuple[str, List[str]]]]:
    """Header and (budget class, cells) lines of the wide per-variant table, sorted for display"""
    variants = [v for v in VARIANTS if any(r.variant == v for r in rows)]
    several_datasets = len({r.dataset for r in rows}) > 1
    groups: Dict[Tuple[str, str], Dict[str, EvalReport]] = {}
    for row in rows:
        groups.setdefault((row.dataset, row.model), {})[row.variant] = row
    header = ['Model', 'Params'] + [f'{v} {metric}' for v in variants for metric in ('F1(%)', 'Acc(%)', 'Size(KB)')]
    lines = []
    for (dataset, model), by_variant in groups.items():
        sized = [r for r in by_variant.values() if r.error is None]
        reference = by_variant.get('baseline') if 'baseline' in by_variant and by_variant['baseline'].error is None \
            else min(sized, key=lambda r: r.serialized_bytes, default=None)
        group = budget_class(reference.serialized_bytes) if reference else 'Not sized'
        any_row = reference or next(iter(by_variant.values()))
        cells = [f'{model} ({dataset})' if several_datasets else model,
                 str(reference.param_count) if reference else '-']
        for v in variants:
            row = by_variant.get(v)
            if row is None:
                cells += ['-'] * 3
            elif row.error is not None:
                cells += ['error'] * 3
            else:
                cells += [_percent(row.macro_f1), _percent(row.accuracy), _size_cell(row)]
        key = (BUDGET_CLASSES.index(group), any_row.family, any_row.hidden_size, any_row.layers, model, dataset)
        lines.append((key, group, cells))
    lines.sort(key=lambda line: line[0])
    return header, [(group, cells) for _, group, cells in lines]


def _markdown(header: List[str], body: List[List[str]]) -> List[str]:
    return ['| ' + ' | '.join(header) + ' |', '|' + '---|' * len(header)] + \
        ['| ' + ' | '.join(cells) + ' |' for cells in body]


def _csv(header: List[str], body: List[List[Any]]) -> str:
    buffer = io.StringIO()
    pd.DataFrame(body, columns=header).to_csv(buffer, index=False, lineterminator='\n')
    return buffer.getvalue()

def _row_label(row: EvalReport) -> str:
    return ' '.join(part for part in (row.model, row.variant) if part)


def _provenance(rows: Sequence[EvalReport], metadata: Optional[Dict[str, Any]]) -> List[Tuple[str, str]]:
    """(key, value) pairs recording seeds, metadata, distillation settings and failures of a report"""
    seeds = sorted({r.seed for r in rows if r.seed is not None})
    pairs = [('seeds', ', '.join(str(s) for s in seeds) or 'unknown')]
    pairs += [(str(key), str(value)) for key, value in (metadata or {}).items()]
    for r in rows:
        if r.teacher is not None:
            pairs.append((f'{_row_label(r)} teacher', f'{r.teacher} (alpha {r.alpha})'))
        if r.tau is not None:
            pairs.append((f'{_row_label(r)} tau', str(r.tau)))
    pairs += [(f'failed {_row_label(r)}', r.error) for r in rows if r.error is not None]
    return pairs


def emit_report(rows: Sequence[EvalReport], fmt: str = 'md', metadata: Optional[Dict[str, Any]] = None) -> str:
    """Render report rows as the wide per-variant table grouped by budget class

    Columns are the model, its parameter count, then F1(%), Acc(%) and Size(KB) for each variant present.
    CSV carries the budget class as a trailing column and starts with '# key=value' provenance lines;
    markdown puts the class in group heading rows and appends the same provenance as a footer.

    :param rows: report rows, at least one
    :param fmt: 'md' or 'csv'
    :param metadata: provenance values, e.g. a config echo
    :return: the rendered table
    """
    if not rows:
        raise ValueError('Cannot emit a report without rows')
    if fmt not in REPORT_FORMATS:
        raise ValueError(f'Unknown report format "{fmt}", expected one of {REPORT_FORMATS}')
    header, lines = _report_table(rows)
    provenance = _provenance(rows, metadata)
    if fmt == 'csv':
        comments = [f'# {METRICS_NOTE}'] + [f'# {key}={" ".join(value.splitlines())}' for key, value in provenance]
        table = _csv(header + ['Budget class'], [cells + [group] for group, cells in lines])
        return '\n'.join(comments) + '\n' + table
    body = []
    for i, (group, cells) in enumerate(lines):
        if i == 0 or lines[i - 1][0] != group:
            body.append([f'**{group}**'] + [''] * (len(header) - 1))
        body.append(cells)
    footer = ['', METRICS_NOTE, f'Seeds: {provenance[0][1]}']
    footer += [f'- {key}: {value}' for key, value in provenance[1:] if not key.startswith('failed ')]
    failures = [f'- {_row_label(r)}: {r.error}' for r in rows if r.error is not None]
    if failures:
        footer += ['', 'Failed rows:'] + failures
    return '\n'.join(_markdown(header, body) + footer) + '\n'
