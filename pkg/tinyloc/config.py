from __future__ import annotations

import configparser
import os
from typing import Callable, Dict, List, Optional, Tuple, TypeVar, Union

from tinyloc.distill import KDConfig
from tinyloc.harness import ExperimentConfig, VARIANTS
from tinyloc.helper_functions import ConfigError
from tinyloc.models import MDCSA_KERNEL_SETS, ModelConfig
from tinyloc.quantize import QuantConfig
from tinyloc.rssi_data import SynthConfig
from tinyloc.training import TrainConfig

DEFAULT_SEED = 7
DATA_SOURCES = ('synth', 'inhome', 'uji')

SECTION_DEFAULTS: Dict[str, Dict[str, str]] = {
    'data': {
        'source': 'synth',
        'path': '',
        'validation_path': '',
        'free_living_path': '',
        'rooms': '3',
        'aps': '4',
        'samples_per_room': '400',
        'noise_std': '2.0',
        'dropout': '0.0',
        'window_len': '20',
        'stride': '10',
        'horizon': '1.0',
        'rate_hz': '5.0',
        'area_column': 'SPACEID',
        'label_column': 'label',
        'timestamp_column': 'timestamp',
    },
    'model': {
        'family': 'mamba',
        'hidden_size': '8',
        'layers': '1',
        'state_dim': '16',
        'conv_width': '4',
        'expand': '2',
        'ffn_mult': '16',
        'grid': '',
    },
    'train': {
        'epochs': '50',
        'batch_size': '8',
        'learning_rate': '1e-3',
        'beta1': '0.9',
        'beta2': '0.999',
        'eps': '1e-8',
    },
    'quantize': {
        'scheme': 'static',
        'tau': '6.0',
        'signed': 'false',
        'calibration_sequences': '64',
    },
    'distill': {
        'alpha': '0.1',
        'mode': 'hard_viterbi',
        'teacher_grid': '',
        'hybrid': 'false',
    },
    'report': {
        'format': 'md',
        'variants': 'baseline,static_quant,dynamic_quant',
    },
}
"""Every recognised setting with its default; anything else in a config file is an error"""

T = TypeVar('T')


def _split_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(',') if item.strip()]


class RunConfig:
    """Resolved INI configuration: defaults overlaid with a file's values and command-line overrides

    The single ``seed`` key lives in ``[DEFAULT]`` and seeds every randomness stream.
    """

    def __init__(self, values: Optional[Dict[str, Dict[str, str]]] = None, seed: int = DEFAULT_SEED):
        values = values or {}
        self.values = {section: {**defaults, **values.get(section, {})}
                       for section, defaults in SECTION_DEFAULTS.items()}
        self.seed = seed

    @staticmethod
    def from_text(text: str, source: str = '<string>') -> RunConfig:
        """Parse INI text, rejecting unknown sections and keys"""
        # [DEFAULT] is read as a plain section so its keys are not merged into the others
        parser = configparser.ConfigParser(interpolation=None, default_section='\0')
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f'Cannot parse {source}: {e}') from e
        defaults = dict(parser.items('DEFAULT')) if parser.has_section('DEFAULT') else {}
        unknown_defaults = sorted(set(defaults) - {'seed'})
        if unknown_defaults:
            raise ConfigError(f'Unknown [DEFAULT] settings {unknown_defaults} in {source}; only "seed" is allowed')
        values = {}
        for section in parser.sections():
            if section == 'DEFAULT':
                continue
            if section not in SECTION_DEFAULTS:
                raise ConfigError(f'Unknown config section [{section}] in {source}')
            own = dict(parser.items(section))
            if 'seed' in own:
                raise ConfigError(f'Config section [{section}] has no setting "seed"; seed belongs in [DEFAULT] '
                                  f'({source})')
            for key in own:
                if key not in SECTION_DEFAULTS[section]:
                    raise ConfigError(f'Config section [{section}] has no setting "{key}" ({source})')
            values[section] = own
        return RunConfig(values, _parse_int(defaults.get('seed', str(DEFAULT_SEED)), 'seed'))

    @staticmethod
    def load(path: Union[str, os.PathLike]) -> RunConfig:
        """Read a config file"""
        try:
            with open(path, encoding='utf-8') as handle:
                text = handle.read()
        except OSError as e:
            raise ConfigError(f'Cannot read config file {path}: {e}') from e
        return RunConfig.from_text(text, str(path))

    def override(self, section: str, key: str, value) -> None:
        """Replace one setting, e.g. from a command-line flag"""
        if key not in SECTION_DEFAULTS.get(section, {}):
            raise ConfigError(f'Config section [{section}] has no setting "{key}"')
        self.values[section][key] = str(value)

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _typed(self, section: str, key: str, convert: Callable[[str], T]) -> T:
        value = self.get(section, key)
        try:
            return convert(value)
        except ValueError as e:
            raise ConfigError(f'[{section}] {key} = "{value}" is invalid: {e}') from e

    def get_int(self, section: str, key: str) -> int:
        return self._typed(section, key, int)

    def get_float(self, section: str, key: str) -> float:
        return self._typed(section, key, float)

    def get_bool(self, section: str, key: str) -> bool:
        return self._typed(section, key, _parse_bool)

    def get_list(self, section: str, key: str) -> List[str]:
        return _split_list(self.get(section, key))

    def echo(self) -> Dict[str, str]:
        """Every resolved value as flattened section.key entries, seed first"""
        flat = {'seed': str(self.seed)}
        for section, values in self.values.items():
            flat.update({f'{section}.{key}': value for key, value in values.items()})
        return flat

    #########################
    # Typed builders

    @property
    def data_source(self) -> str:
        source = self.get('data', 'source')
        if source not in DATA_SOURCES:
            raise ConfigError(f'Unknown data source "{source}", expected one of {DATA_SOURCES}')
        return source

    def synth_config(self) -> SynthConfig:
        """Synthetic generator settings from [data]"""
        return SynthConfig(room_count=self.get_int('data', 'rooms'), ap_count=self.get_int('data', 'aps'),
                           samples_per_room=self.get_int('data', 'samples_per_room'),
                           noise_std=self.get_float('data', 'noise_std'), dropout=self.get_float('data', 'dropout'),
                           seed=self.seed, **self.window_settings())

    def window_settings(self) -> Dict[str, float]:
        """Resampling and windowing settings shared by every sequence source"""
        return {'window_len': self.get_int('data', 'window_len'), 'stride': self.get_int('data', 'stride'),
                'horizon': self.get_float('data', 'horizon'), 'rate_hz': self.get_float('data', 'rate_hz')}

    def model_overrides(self) -> Dict[str, int]:
        """Architecture settings shared by every model of a grid"""
        return {key: self.get_int('model', key) for key in ('state_dim', 'conv_width', 'expand', 'ffn_mult')}

    def layer_spec(self, family: str) -> Tuple[int, ...]:
        """[model] layers as a layer spec: a block count for mamba, a kernel set for mdcsa"""
        value = self.get('model', 'layers').strip()
        try:
            if family == 'mdcsa' and value.upper().startswith('L'):
                depth = int(value[1:])
                if depth not in MDCSA_KERNEL_SETS:
                    raise ValueError(f'MDCSA supports L{sorted(MDCSA_KERNEL_SETS)}')
                return MDCSA_KERNEL_SETS[depth]
            if family == 'mamba':
                return (int(value.upper().lstrip('L')),)
            return tuple(int(k) for k in _split_list(value))
        except ValueError as e:
            raise ConfigError(f'[model] layers = "{value}" is invalid for {family}: {e}') from e

    def model_config(self, input_dim: int, class_count: int) -> ModelConfig:
        """The single model described by [model]"""
        family = self.get('model', 'family').strip().lower()
        try:
            return ModelConfig(family, self.get_int('model', 'hidden_size'), self.layer_spec(family), input_dim,
                               class_count, **self.model_overrides())
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f'Invalid [model] settings: {e}') from e

    def model_grid(self) -> Tuple[str, ...]:
        """Model names for sweeps: [model] grid, or the single [model] as a name"""
        grid = self.get_list('model', 'grid')
        if grid:
            return tuple(grid)
        family = self.get('model', 'family').strip().lower()
        layer_count = len(self.layer_spec(family)) if family == 'mdcsa' else self.layer_spec(family)[0]
        return (f'{family}:H{self.get_int("model", "hidden_size")}L{layer_count}',)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.get_int('train', 'epochs'), batch_size=self.get_int('train', 'batch_size'),
                           learning_rate=self.get_float('train', 'learning_rate'),
                           beta1=self.get_float('train', 'beta1'), beta2=self.get_float('train', 'beta2'),
                           eps=self.get_float('train', 'eps'))

    def quant_config(self) -> QuantConfig:
        return QuantConfig(scheme=self.get('quantize', 'scheme'), tau=self.get_float('quantize', 'tau'),
                           signed=self.get_bool('quantize', 'signed'),
                           calibration_sequences=self.get_int('quantize', 'calibration_sequences'))

    def kd_config(self) -> KDConfig:
        return KDConfig(alpha=self.get_float('distill', 'alpha'), mode=self.get('distill', 'mode'),
                        train=self.train_config())

    @property
    def report_format(self) -> str:
        fmt = self.get('report', 'format')
        if fmt not in ('md', 'csv'):
            raise ConfigError(f'Unknown report format "{fmt}", expected md or csv')
        return fmt

    def experiment_config(self, dataset_id: str) -> ExperimentConfig:
        """The sweep described by [model] grid, [report] variants and [distill] teacher_grid"""
        variants = tuple(self.get_list('report', 'variants'))
        unknown = [v for v in variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f'Unknown [report] variants {unknown}, expected a subset of {VARIANTS}')
        return ExperimentConfig(models=self.model_grid(), variants=variants, seed=self.seed, dataset_id=dataset_id,
                                train=self.train_config(), quant=self.quant_config(), kd=self.kd_config(),
                                teacher_models=tuple(self.get_list('distill', 'teacher_grid')),
                                model_overrides=self.model_overrides())


def _parse_int(value: str, key: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f'{key} must be an integer, got "{value}"')


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in configparser.ConfigParser.BOOLEAN_STATES:
        return configparser.ConfigParser.BOOLEAN_STATES[lowered]
    raise ValueError('expected true or false')
