from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from tinyloc.helper_functions import ConfigError, DataFormatError, flatten, numpy_rng, seed_stream

INHOME_RANGE = (-110.0, 0.0)
UJI_RANGE = (-104.0, 0.0)
MISSING_SENTINEL = -120.0
"""Fill value for gaps longer than the forward-fill horizon, below any feasible reading"""
UJI_NOT_DETECTED = 100
UJI_SENTINEL = -105.0
UJI_AP_COUNT = 520
UJI_LOCATION_COLUMNS = ('BUILDINGID', 'FLOOR')
DEFAULT_RATE_HZ = 5.0
DEFAULT_WINDOW = 20
DEFAULT_STRIDE = 10
DEFAULT_HORIZON = 1.0
TRAIN_FRACTION = 0.75
_TIME_TOLERANCE = 1e-9


#########################
# Data types

@dataclass(frozen=True, eq=False)
class RawStream:
    """Timestamped RSSI readings (dBm, NaN where missing) with per-timestamp room labels"""
    timestamps: np.ndarray
    readings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=np.float64)
        readings = np.asarray(self.readings, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if readings.ndim != 2 or len(timestamps) != len(readings) or len(labels) != len(readings):
            raise DataFormatError(f'Inconsistent stream: {len(timestamps)} timestamps, readings shape '
                                  f'{readings.shape}, {len(labels)} labels')
        if len(timestamps) > 1 and np.any(np.diff(timestamps) < 0):
            raise DataFormatError('Stream timestamps must be sorted')
        object.__setattr__(self, 'timestamps', timestamps)
        object.__setattr__(self, 'readings', readings)
        object.__setattr__(self, 'labels', labels)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def feature_dim(self) -> int:
        return self.readings.shape[1]

    def segment(self, start: int, stop: int) -> RawStream:
        return RawStream(self.timestamps[start:stop], self.readings[start:stop], self.labels[start:stop])


@dataclass(frozen=True, eq=False)
class LabeledSequence:
    """T x D normalized features in [0, 1] with T class labels"""
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or len(features) < 1 or len(labels) != len(features):
            raise DataFormatError(f'Sequence needs T >= 1 rows and matching labels, got features '
                                  f'{features.shape} and {len(labels)} labels')
        if np.isnan(features).any() or features.min() < 0.0 or features.max() > 1.0:
            raise DataFormatError('Sequence features must be free of missing values and lie in [0, 1]')
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class ScalerParams:
    """Per-feature min and max in dBm, fit on the training split"""
    minimum: np.ndarray
    maximum: np.ndarray


SPLIT_NAMES = ('train', 'val', 'test')


@dataclass(eq=False)
class DatasetSplit:
    """Train, validation and test sequences over K classes and D features"""
    train: List[LabeledSequence]
    val: List[LabeledSequence]
    test: List[LabeledSequence]
    class_count: int
    feature_dim: int
    class_names: Tuple[str, ...] = ()
    scaler: Optional[ScalerParams] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.class_names:
            self.class_names = tuple(str(k) for k in range(self.class_count))
        if len(self.class_names) != self.class_count:
            raise DataFormatError(f'{len(self.class_names)} class names for {self.class_count} classes')
        for name in SPLIT_NAMES:
            for i, sequence in enumerate(getattr(self, name)):
                if sequence.features.shape[1] != self.feature_dim:
                    raise DataFormatError(f'{name}[{i}] has {sequence.features.shape[1]} features, '
                                          f'expected {self.feature_dim}')
                if sequence.labels.min() < 0 or sequence.labels.max() >= self.class_count:
                    raise DataFormatError(f'{name}[{i}] has labels outside [0, {self.class_count})')

    def sequences(self, name: str) -> List[LabeledSequence]:
        if name not in SPLIT_NAMES:
            raise ValueError(f'Unknown split "{name}", expected one of {SPLIT_NAMES}')
        return getattr(self, name)

    def stacked(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        """(N, T, D) features and (N, T) labels of one split; all its sequences must share T"""
        sequences = self.sequences(name)
        if not sequences:
            return np.zeros((0, 1, self.feature_dim), np.float32), np.zeros((0, 1), np.int64)
        lengths = {len(s) for s in sequences}
        if len(lengths) != 1:
            raise DataFormatError(f'Split "{name}" mixes sequence lengths {sorted(lengths)}')
        return np.stack([s.features for s in sequences]), np.stack([s.labels for s in sequences])


@dataclass(frozen=True)
class SynthConfig:
    """Deterministic room-walk generator settings"""
    room_count: int = 3
    ap_count: int = 4
    samples_per_room: int = 400
    room_means: Optional[Tuple[Tuple[float, ...], ...]] = None
    noise_std: float = 2.0
    dropout: float = 0.0
    seed: int = 7
    dwell: int = 40
    free_living_samples_per_room: Optional[int] = None
    rate_hz: float = DEFAULT_RATE_HZ
    window_len: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    horizon: float = DEFAULT_HORIZON

    def __post_init__(self):
        if self.room_count < 2:
            raise ConfigError(f'Synthetic data needs at least 2 rooms, got {self.room_count}')
        if self.ap_count < 1 or self.samples_per_room < 1 or self.dwell < 1:
            raise ConfigError('ap_count, samples_per_room and dwell must all be at least 1')
        if self.noise_std < 0:
            raise ConfigError(f'noise_std must be non-negative, got {self.noise_std}')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f'dropout must lie in [0, 1), got {self.dropout}')
        means = self.means()
        if means.shape != (self.room_count, self.ap_count):
            raise ConfigError(f'room_means must be {self.room_count} x {self.ap_count}, got {means.shape}')
        if len({tuple(row) for row in means.tolist()}) != self.room_count:
            raise ConfigError('Room mean vectors must be pairwise distinct')

    def means(self) -> np.ndarray:
        """room_count x ap_count mean RSSI; by default each room hears "its" AP strongest"""
        if self.room_means is not None:
            return np.asarray(self.room_means, dtype=np.float64)
        levels = np.linspace(-40.0, -85.0, self.ap_count) if self.ap_count > 1 else np.array([-40.0])
        rows = []
        for r in range(self.room_count):
            shift, lap = r % self.ap_count, r // self.ap_count
            rows.append(np.roll(levels, shift) - 3.0 * lap)
        return np.clip(np.array(rows), *INHOME_RANGE)


#########################
# Stream cleaning

def forward_fill(stream: RawStream, horizon: float = DEFAULT_HORIZON) -> RawStream:
    """Fill missing readings per AP with the last observation at most horizon seconds old

    Older gaps, and readings missing before any observation, become MISSING_SENTINEL.

    :param stream: stream with NaN for missing readings
    :param horizon: maximum age in seconds of a carried-forward value
    :return: stream without missing values
    """
    if len(stream) == 0:
        raise DataFormatError('Cannot forward-fill an empty stream')
    if not horizon > 0:
        raise ValueError(f'Forward-fill horizon must be positive, got {horizon}')
    readings = pd.DataFrame(stream.readings)
    times = stream.timestamps[:, None]
    last_seen = pd.DataFrame(np.where(readings.notna(), times, np.nan)).ffill().to_numpy()
    filled = readings.ffill().to_numpy()
    with np.errstate(invalid='ignore'):
        stale = np.isnan(last_seen) | (times - last_seen > horizon + _TIME_TOLERANCE)
    return RawStream(stream.timestamps, np.where(stale, MISSING_SENTINEL, filled), stream.labels)


def resample_to_grid(stream: RawStream, rate_hz: float = DEFAULT_RATE_HZ) -> RawStream:
    """Map a stream onto a uniform grid from its first timestamp

    Each grid point takes the nearest sample within half a grid period. Grid points with no such sample get
    NaN readings, left for forward_fill, and carry the label of the last earlier sample.
    """
    if len(stream) == 0:
        raise DataFormatError('Cannot resample an empty stream')
    if not rate_hz > 0:
        raise ValueError(f'Resampling rate must be positive, got {rate_hz}')
    span = stream.timestamps[-1] - stream.timestamps[0]
    grid = stream.timestamps[0] + np.arange(int(np.floor(span * rate_hz + _TIME_TOLERANCE)) + 1) / rate_hz
    source = pd.DataFrame({'timestamp': stream.timestamps, 'row': np.arange(len(stream))})
    points = pd.DataFrame({'timestamp': grid})
    nearest = pd.merge_asof(points, source, on='timestamp', direction='nearest',
                            tolerance=0.5 / rate_hz + _TIME_TOLERANCE)['row'].to_numpy(dtype=np.float64)
    earlier = pd.merge_asof(points, source, on='timestamp', direction='backward')['row'].to_numpy(dtype=np.int64)
    matched = ~np.isnan(nearest)
    rows = np.where(matched, np.nan_to_num(nearest), earlier).astype(np.int64)
    readings = np.where(matched[:, None], stream.readings[rows], np.nan)
    return RawStream(grid, readings, stream.labels[rows])


def window_count(length: int, window_len: int, stride: int) -> int:
    """max(0, floor((length - window_len) / stride) + 1)"""
    return max(0, (length - window_len) // stride + 1) if length >= window_len else 0


def make_windows(stream: RawStream, window_len: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE) \
        -> List[RawStream]:
    """Consecutive window_len-sample segments offset by stride; the short remainder is dropped"""
    if window_len < 1:
        raise ValueError(f'window_len must be at least 1, got {window_len}')
    if not 1 <= stride <= window_len:
        raise ValueError(f'stride must lie in [1, window_len={window_len}], got {stride}')
    return [stream.segment(s, s + window_len) for s in
            range(0, window_count(len(stream), window_len, stride) * stride, stride)]


#########################
# Scaling

def _rows(data: Union[RawStream, np.ndarray, Iterable]) -> np.ndarray:
    if isinstance(data, RawStream):
        return data.readings
    if isinstance(data, np.ndarray):
        return data.reshape(-1, data.shape[-1])
    return np.concatenate([_rows(item) for item in data])


def fit_scaler(train_streams: Union[RawStream, np.ndarray, Iterable]) -> ScalerParams:
    """Per-feature min and max over the training rows

    :param train_streams: training streams, or arrays whose last axis is the feature axis
    :return: scaler parameters; constant features are reported and later map to 0
    """
    rows = _rows(train_streams)
    if len(rows) == 0:
        raise DataFormatError('Cannot fit a scaler on no training rows')
    minimum, maximum = np.nanmin(rows, axis=0), np.nanmax(rows, axis=0)
    constant = np.flatnonzero(maximum <= minimum)
    if len(constant):
        logging.warning(f'Features {constant.tolist()} are constant on the training split; they will scale to 0')
    return ScalerParams(minimum, maximum)


def scale_features(values: np.ndarray, params: ScalerParams) -> np.ndarray:
    """(v - min) / (max - min) clamped to [0, 1]; constant features map to 0"""
    span = params.maximum - params.minimum
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (np.asarray(values, dtype=np.float64) - params.minimum) / safe, 0.0)
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


def apply_scaler(stream: RawStream, params: ScalerParams) -> LabeledSequence:
    """Normalize a filled stream into a labeled sequence"""
    return LabeledSequence(scale_features(stream.readings, params), stream.labels)


#########################
# Splitting

def split_indices(strata: np.ndarray, seed: int, train_fraction: float = TRAIN_FRACTION) \
        -> Tuple[np.ndarray, np.ndarray]:
    """Seeded stratified train/validation split of range(len(strata))

    Falls back to an unstratified shuffle when some stratum is too small to split.
    """
    indices = np.arange(len(strata))
    random_state = seed_stream(seed, 'split')
    try:
        train, val = train_test_split(indices, train_size=train_fraction, random_state=random_state,
                                      stratify=strata)
    except ValueError as e:
        logging.warning(f'Stratified split not possible ({e}); using an unstratified split')
        train, val = train_test_split(indices, train_size=train_fraction, random_state=random_state)
    return np.sort(train), np.sort(val)


def majority_label(labels: np.ndarray) -> int:
    """Most frequent label, lowest id on ties"""
    return int(np.argmax(np.bincount(labels)))


#########################
# In-home streams

def _label_sort_key(name: str):
    return (0, int(name), name) if name.lstrip('-').isdigit() else (1, 0, name)


def check_rssi_range(readings: np.ndarray, bounds: Tuple[float, float], source: str) -> None:
    """Raise DataFormatError when a present (non-NaN) reading lies outside bounds"""
    lo, hi = bounds
    with np.errstate(invalid='ignore'):
        outside = ~np.isnan(readings) & ((readings < lo) | (readings > hi))
    if outside.any():
        rows, cols = np.nonzero(outside)
        raise DataFormatError(f'RSSI {readings[rows[0], cols[0]]} at row {rows[0]}, column {cols[0]} of {source} '
                              f'lies outside [{lo:g}, {hi:g}] dBm')


def read_stream_csv(path: Union[str, os.PathLike], label_column: str = 'label',
                    timestamp_column: str = 'timestamp', class_names: Optional[Sequence[str]] = None,
                    sep: str = ',') -> Tuple[RawStream, Tuple[str, ...]]:
    """Read one delimiter-separated stream: a timestamp column, one column per AP, and a label column

    Empty cells are missing readings.

    :param path: file to read
    :param label_column: name of the room label column
    :param timestamp_column: name of the timestamp column, in seconds
    :param class_names: label vocabulary; sorted distinct labels of this file when omitted
    :param sep: field delimiter
    :return: the stream and its class names
    """
    frame = pd.read_csv(path, sep=sep)
    for column in (timestamp_column, label_column):
        if column not in frame.columns:
            raise DataFormatError(f'Missing column "{column}" in {path}')
    ap_columns = [c for c in frame.columns if c not in (timestamp_column, label_column)]
    if not ap_columns:
        raise DataFormatError(f'No access-point columns in {path}')
    frame = frame.sort_values(timestamp_column, kind='stable')
    try:
        readings = frame[ap_columns].astype(float).to_numpy()
    except ValueError as e:
        raise DataFormatError(f'Non-numeric RSSI value in {path}: {e}')
    check_rssi_range(readings, INHOME_RANGE, str(path))
    raw_labels = frame[label_column].astype(str).to_numpy()
    if class_names is None:
        class_names = sorted(set(raw_labels), key=_label_sort_key)
    lookup = {name: i for i, name in enumerate(class_names)}
    unknown = [i for i, name in enumerate(raw_labels) if name not in lookup]
    if unknown:
        raise DataFormatError(f'Unknown labels in {path} at rows {unknown[:10]}: '
                              f'{sorted(set(raw_labels[unknown]))[:10]}')
    labels = np.array([lookup[name] for name in raw_labels], dtype=np.int64)
    return RawStream(frame[timestamp_column].astype(float).to_numpy(), readings, labels), tuple(class_names)


def _stream_windows(streams: Sequence[RawStream], window_len: int, stride: int, horizon: float,
                    rate_hz: float) -> List[RawStream]:
    return flatten(make_windows(forward_fill(resample_to_grid(s, rate_hz), horizon), window_len, stride)
                   for s in streams)


def prepare_inhome(fingerprint: Sequence[RawStream], free_living: Sequence[RawStream], class_count: int,
                   window_len: int = DEFAULT_WINDOW, stride: int = DEFAULT_STRIDE,
                   horizon: float = DEFAULT_HORIZON, rate_hz: float = DEFAULT_RATE_HZ, seed: int = 0,
                   class_names: Sequence[str] = ()) -> DatasetSplit:
    """Resample, fill, window and normalize in-home streams

    Fingerprint windows are split 75/25 into train and validation, stratified by window majority label.
    Free-living windows form the test split. The scaler is fit on the training windows only.
    """
    train_val = _stream_windows(fingerprint, window_len, stride, horizon, rate_hz)
    if not train_val:
        raise DataFormatError(f'Fingerprint streams are shorter than one {window_len}-sample window')
    test = _stream_windows(free_living, window_len, stride, horizon, rate_hz)
    train_idx, val_idx = split_indices(np.array([majority_label(w.labels) for w in train_val]), seed)
    scaler = fit_scaler([train_val[i] for i in train_idx])
    logging.info(f'In-home windows: {len(train_idx)} train, {len(val_idx)} val, {len(test)} test')
    return DatasetSplit(train=[apply_scaler(train_val[i], scaler) for i in train_idx],
                        val=[apply_scaler(train_val[i], scaler) for i in val_idx],
                        test=[apply_scaler(w, scaler) for w in test],
                        class_count=class_count, feature_dim=train_val[0].feature_dim,
                        class_names=tuple(class_names), scaler=scaler, seed=seed)


#########################
# UJIIndoorLoc

def read_uji_csv(path: Union[str, os.PathLike]) -> pd.DataFrame:
    """Read a UJIIndoorLoc file in its published column layout"""
    return pd.read_csv(path)


def _uji_keys(records: pd.DataFrame, area_column: str, source: str) -> List[str]:
    for column in UJI_LOCATION_COLUMNS + (area_column,):
        if column not in records.columns:
            raise DataFormatError(f'Missing column "{column}" in {source} records')
    keys = records[list(UJI_LOCATION_COLUMNS) + [area_column]].astype(int).to_numpy()
    return [f'B{b}-F{f}-A{a}' for b, f, a in keys]


def _uji_readings(records: pd.DataFrame, ap_columns: List[str], source: str) -> np.ndarray:
    values = records[ap_columns].to_numpy(dtype=np.float64)
    check_rssi_range(np.where(values == UJI_NOT_DETECTED, np.nan, values), UJI_RANGE, f'{source} records')
    return np.where(values == UJI_NOT_DETECTED, UJI_SENTINEL, values)


def load_uji(train_records: pd.DataFrame, validation_records: pd.DataFrame, area_column: str = 'SPACEID',
             seed: int = 0, ap_count: int = UJI_AP_COUNT) -> DatasetSplit:
    """Turn UJIIndoorLoc records into length-1 labeled sequences over joint building-floor-area classes

    The published training file is split 75/25 into train and validation; the published validation file
    becomes the test split.

    :param train_records: rows of the published training file
    :param validation_records: rows of the published validation file
    :param area_column: column naming the area within a floor
    :param seed: split seed
    :param ap_count: expected number of WAP columns
    :return: dataset split
    """
    ap_columns = [c for c in train_records.columns if str(c).startswith('WAP')]
    if len(ap_columns) != ap_count:
        raise DataFormatError(f'Expected {ap_count} WAP columns, found {len(ap_columns)}')
    missing = [c for c in ap_columns if c not in validation_records.columns]
    if missing:
        raise DataFormatError(f'Validation records lack columns {missing[:10]}')
    train_keys = _uji_keys(train_records, area_column, 'training')
    class_names = sorted(set(train_keys))
    lookup = {name: i for i, name in enumerate(class_names)}
    test_keys = _uji_keys(validation_records, area_column, 'validation')
    unknown = [i for i, key in enumerate(test_keys) if key not in lookup]
    if unknown:
        raise DataFormatError(f'Validation records {unknown[:10]} carry labels unseen in training: '
                              f'{sorted({test_keys[i] for i in unknown})[:10]}')

    labels = np.array([lookup[k] for k in train_keys], dtype=np.int64)
    readings = _uji_readings(train_records, ap_columns, 'training')
    train_idx, val_idx = split_indices(labels, seed)
    scaler = fit_scaler(readings[train_idx])
    features = scale_features(readings, scaler)
    test_features = scale_features(_uji_readings(validation_records, ap_columns, 'validation'), scaler)
    test_labels = [lookup[k] for k in test_keys]

    def single_steps(rows: np.ndarray, row_labels) -> List[LabeledSequence]:
        return [LabeledSequence(row[None, :], np.array([label])) for row, label in zip(rows, row_labels)]

    logging.info(f'UJI records: {len(train_idx)} train, {len(val_idx)} val, {len(test_labels)} test, '
                 f'{len(class_names)} classes')
    return DatasetSplit(train=single_steps(features[train_idx], labels[train_idx]),
                        val=single_steps(features[val_idx], labels[val_idx]),
                        test=single_steps(test_features, test_labels),
                        class_count=len(class_names), feature_dim=len(ap_columns),
                        class_names=tuple(class_names), scaler=scaler, seed=seed)


#########################
# Synthetic walks

def _walk(cfg: SynthConfig, samples_per_room: int, rng: np.random.Generator) -> RawStream:
    means = cfg.means()
    segments = []
    for room in range(cfg.room_count):
        sizes = [cfg.dwell] * (samples_per_room // cfg.dwell)
        if samples_per_room % cfg.dwell:
            sizes.append(samples_per_room % cfg.dwell)
        segments.extend((room, size) for size in sizes)
    order = rng.permutation(len(segments))
    labels = np.concatenate([np.full(segments[i][1], segments[i][0], dtype=np.int64) for i in order])
    readings = means[labels] + rng.normal(0.0, cfg.noise_std, size=(len(labels), cfg.ap_count))
    readings = np.clip(readings, *INHOME_RANGE)
    readings[rng.random(readings.shape) < cfg.dropout] = np.nan
    return RawStream(np.arange(len(labels)) / cfg.rate_hz, readings, labels)


def synthetic_streams(cfg: SynthConfig) -> Tuple[RawStream, RawStream]:
    """The fingerprint walk and the free-living walk generated from cfg"""
    free_samples = cfg.free_living_samples_per_room or max(cfg.samples_per_room // 2, cfg.window_len)
    fingerprint = _walk(cfg, cfg.samples_per_room, numpy_rng(cfg.seed, 'synth-fingerprint'))
    free_living = _walk(cfg, free_samples, numpy_rng(cfg.seed, 'synth-free-living'))
    return fingerprint, free_living


def generate_synthetic(cfg: SynthConfig = SynthConfig()) -> DatasetSplit:
    """Deterministic class-separable dataset: random room walks over per-room AP means with noise and dropout"""
    fingerprint, free_living = synthetic_streams(cfg)
    return prepare_inhome([fingerprint], [free_living], cfg.room_count, cfg.window_len, cfg.stride,
                          cfg.horizon, cfg.rate_hz, cfg.seed,
                          class_names=tuple(f'room{r}' for r in range(cfg.room_count)))


#########################
# Summaries and oracles

def class_histogram(split: DatasetSplit) -> Dict[str, Dict[str, int]]:
    """Per-split timestep counts for every class name"""
    histogram = {}
    for name in SPLIT_NAMES:
        counts = np.zeros(split.class_count, dtype=np.int64)
        for sequence in split.sequences(name):
            counts += np.bincount(sequence.labels, minlength=split.class_count)
        histogram[name] = {cls: int(c) for cls, c in zip(split.class_names, counts)}
    return histogram


def nearest_mean_classify(split: DatasetSplit, name: str = 'test') -> np.ndarray:
    """Label every timestep of a split with the class whose mean training feature vector is closest"""
    train_x = np.concatenate([s.features for s in split.train]).astype(np.float64)
    train_y = np.concatenate([s.labels for s in split.train])
    centroids = np.stack([train_x[train_y == k].mean(axis=0) if np.any(train_y == k)
                          else np.full(split.feature_dim, np.inf) for k in range(split.class_count)])
    x = np.concatenate([s.features for s in split.sequences(name)]).astype(np.float64)
    return np.argmin(((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
