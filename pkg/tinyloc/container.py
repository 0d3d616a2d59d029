"""Binary little-endian container for models and datasets

Layout::

    b"TLOC" | u16 version | u32 metadata length | metadata (UTF-8 JSON, sorted keys) | u32 record count | records

Each record::

    u16 name length | name | u8 dtype tag | u8 ndim | u32 dims... |
    u32 quant-param count | (f32 scale, i32 zero_point)... | u32 outlier count | u32 outlier columns... | payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from tinyloc.helper_functions import ContainerFormatError
from tinyloc.models import EmissionModel, ModelConfig, build_model, param_count
from tinyloc.quantize import QuantizedLinear, SIGNED_RANGE, UNSIGNED_RANGE
from tinyloc.rssi_data import SPLIT_NAMES, DatasetSplit, LabeledSequence, ScalerParams

MAGIC = b'TLOC'
VERSION = 1
QUANT_PARAM_BYTES = 8

DTYPE_TAGS = {'f32': 1, 'f16': 2, 'u8': 3, 'i8': 4, 'i32': 5, 'f64': 6}
_TAG_NAMES = {tag: name for name, tag in DTYPE_TAGS.items()}
_NUMPY_DTYPES = {'f32': '<f4', 'f16': '<f2', 'u8': 'u1', 'i8': 'i1', 'i32': '<i4', 'f64': '<f8'}
_TORCH_NAMES = {torch.float32: 'f32', torch.float16: 'f16', torch.uint8: 'u8', torch.int8: 'i8',
                torch.int32: 'i32', torch.float64: 'f64'}

PathLike = Union[str, os.PathLike]


@dataclass
class TensorRecord:
    """One named tensor plus its optional quantization parameters and outlier columns"""
    name: str
    dtype: str
    array: np.ndarray
    quant_params: List[Tuple[float, int]] = field(default_factory=list)
    outliers: List[int] = field(default_factory=list)

    def __post_init__(self):
        if self.dtype not in DTYPE_TAGS:
            raise ContainerFormatError(f'Unknown dtype "{self.dtype}" for tensor "{self.name}"')
        self.array = np.ascontiguousarray(self.array, dtype=_NUMPY_DTYPES[self.dtype])

    @property
    def payload_bytes(self) -> int:
        return self.array.nbytes

    @property
    def quant_param_bytes(self) -> int:
        return QUANT_PARAM_BYTES * len(self.quant_params)

    @property
    def overhead_bytes(self) -> int:
        """Record header bytes excluding quant params"""
        return 2 + len(self.name.encode('utf-8')) + 2 + 4 * self.array.ndim + 4 + 4 + 4 * len(self.outliers)

    def encode(self) -> bytes:
        name = self.name.encode('utf-8')
        parts = [struct.pack('<H', len(name)), name,
                 struct.pack('<BB', DTYPE_TAGS[self.dtype], self.array.ndim),
                 struct.pack(f'<{self.array.ndim}I', *self.array.shape),
                 struct.pack('<I', len(self.quant_params))]
        parts.extend(struct.pack('<fi', scale, zero_point) for scale, zero_point in self.quant_params)
        parts.append(struct.pack('<I', len(self.outliers)))
        parts.append(struct.pack(f'<{len(self.outliers)}I', *self.outliers))
        parts.append(self.array.tobytes())
        return b''.join(parts)

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.array.astype(self.array.dtype.newbyteorder('='), copy=True))


@dataclass
class TensorSize:
    """Byte accounting for one record"""
    name: str
    dtype: str
    elements: int
    payload_bytes: int
    quant_param_bytes: int
    overhead_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.payload_bytes + self.quant_param_bytes + self.overhead_bytes


@dataclass
class SizeBreakdown:
    """Exact serialized size of a container, part by part"""
    header_bytes: int
    tensors: List[TensorSize]

    @property
    def payload_bytes(self) -> int:
        return sum(t.payload_bytes for t in self.tensors)

    @property
    def quant_param_bytes(self) -> int:
        return sum(t.quant_param_bytes for t in self.tensors)

    @property
    def overhead_bytes(self) -> int:
        return sum(t.overhead_bytes for t in self.tensors)

    @property
    def total_bytes(self) -> int:
        return self.header_bytes + sum(t.total_bytes for t in self.tensors)

    def tensor(self, name: str) -> TensorSize:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def render(self) -> str:
        """Plain-text table of the breakdown"""
        lines = [f'{"tensor":40} {"dtype":5} {"elements":>9} {"payload":>9} {"qparams":>8} {"overhead":>8}']
        for t in self.tensors:
            lines.append(f'{t.name:40} {t.dtype:5} {t.elements:>9} {t.payload_bytes:>9} '
                         f'{t.quant_param_bytes:>8} {t.overhead_bytes:>8}')
        lines.append(f'header {self.header_bytes} B, payload {self.payload_bytes} B, '
                     f'quant params {self.quant_param_bytes} B, record overhead {self.overhead_bytes} B, '
                     f'total {self.total_bytes} B')
        return '\n'.join(lines)


#########################
# Generic container

def _encode_metadata(metadata: Dict[str, Any]) -> bytes:
    return json.dumps(metadata, sort_keys=True, separators=(',', ':')).encode('utf-8')


def header_size(metadata: Dict[str, Any]) -> int:
    return len(MAGIC) + 2 + 4 + len(_encode_metadata(metadata)) + 4


def encode_container(metadata: Dict[str, Any], records: List[TensorRecord]) -> bytes:
    """Serialize metadata and tensor records"""
    meta = _encode_metadata(metadata)
    head = MAGIC + struct.pack('<HI', VERSION, len(meta)) + meta + struct.pack('<I', len(records))
    return head + b''.join(r.encode() for r in records)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ContainerFormatError(f'Container truncated at byte {self.offset} (needed {n} more bytes)')
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(data: bytes) -> Tuple[Dict[str, Any], List[TensorRecord]]:
    """Parse container bytes into metadata and records"""
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise ContainerFormatError('Not a tinyloc container (bad magic bytes)')
    version, meta_length = reader.unpack('<HI')
    if version != VERSION:
        raise ContainerFormatError(f'Unsupported container version {version}')
    try:
        metadata = json.loads(reader.take(meta_length).decode('utf-8'))
    except ValueError as e:
        raise ContainerFormatError(f'Corrupt container metadata: {e}')
    records = []
    for _ in range(reader.unpack('<I')[0]):
        name = reader.take(reader.unpack('<H')[0]).decode('utf-8')
        tag, ndim = reader.unpack('<BB')
        if tag not in _TAG_NAMES:
            raise ContainerFormatError(f'Unknown dtype tag {tag} for tensor "{name}"')
        dtype = _TAG_NAMES[tag]
        shape = reader.unpack(f'<{ndim}I')
        quant_params = [reader.unpack('<fi') for _ in range(reader.unpack('<I')[0])]
        outliers = list(reader.unpack(f'<{reader.unpack("<I")[0]}I'))
        count = int(np.prod(shape)) if ndim else 1
        itemsize = np.dtype(_NUMPY_DTYPES[dtype]).itemsize
        array = np.frombuffer(reader.take(count * itemsize), dtype=_NUMPY_DTYPES[dtype]).reshape(shape)
        records.append(TensorRecord(name, dtype, array.copy(), list(quant_params), outliers))
    if reader.offset != len(data):
        raise ContainerFormatError(f'{len(data) - reader.offset} trailing bytes after the last record')
    return metadata, records


def size_breakdown(metadata: Dict[str, Any], records: List[TensorRecord]) -> SizeBreakdown:
    """Byte accounting that sums to len(encode_container(metadata, records))"""
    return SizeBreakdown(header_size(metadata),
                         [TensorSize(r.name, r.dtype, r.array.size, r.payload_bytes, r.quant_param_bytes,
                                     r.overhead_bytes) for r in records])


#########################
# Models

def _tensor_record(name: str, tensor: torch.Tensor) -> TensorRecord:
    if tensor.dtype not in _TORCH_NAMES:
        raise ContainerFormatError(f'Tensor "{name}" has unsupported dtype {tensor.dtype}')
    return TensorRecord(name, _TORCH_NAMES[tensor.dtype], tensor.detach().cpu().numpy())


def model_records(model: nn.Module) -> List[TensorRecord]:
    """Tensor records for every parameter, with quantized layers stored as codes plus their parameters"""
    records = []
    for module_name, module in model.named_modules():
        prefix = f'{module_name}.' if module_name else ''
        if isinstance(module, QuantizedLinear):
            quant_params = list(zip(module.scales.tolist(), module.zero_points.tolist()))
            records.append(TensorRecord(f'{prefix}weight', _TORCH_NAMES[module.qweight.dtype],
                                        module.qweight.numpy(), quant_params, module.outlier_columns.tolist()))
            if module.outlier_columns.numel():
                records.append(_tensor_record(f'{prefix}outlier_weight', module.outlier_weight))
            if module.bias is not None:
                records.append(_tensor_record(f'{prefix}bias', module.bias))
        else:
            records.extend(_tensor_record(f'{prefix}{name}', p) for name, p in module.named_parameters(recurse=False))
    return records


def model_metadata(model: nn.Module) -> Dict[str, Any]:
    metadata = {'kind': 'model', 'param_count': param_count(model),
                'compression': dict(getattr(model, 'compression', {'variant': 'baseline'}))}
    if isinstance(model, EmissionModel):
        metadata.update(config=model.config.to_metadata(), name=model.config.name, seed=model.seed)
    return metadata


def encode_model(model: nn.Module) -> bytes:
    """Container bytes for a model"""
    return encode_container(model_metadata(model), model_records(model))


def model_size(model: nn.Module) -> SizeBreakdown:
    """Exact serialized size of model, per tensor; total_bytes == len(encode_model(model))"""
    return size_breakdown(model_metadata(model), model_records(model))


def model_checksum(model: nn.Module) -> str:
    """SHA-256 over tensor names, quantization parameters and payloads"""
    digest = hashlib.sha256()
    for record in model_records(model):
        digest.update(record.name.encode('utf-8'))
        digest.update(record.encode())
    return digest.hexdigest()


def _quantized_layer(name: str, layer: nn.Linear, weight: TensorRecord, records: Dict[str, TensorRecord],
                     mode: str) -> QuantizedLinear:
    qmin, qmax = SIGNED_RANGE if weight.dtype == 'i8' else UNSIGNED_RANGE
    outlier_weight = records.pop(f'{name}.outlier_weight', None)
    bias = records.pop(f'{name}.bias', None)
    scales = torch.tensor([s for s, _ in weight.quant_params], dtype=torch.float32)
    zero_points = torch.tensor([z for _, z in weight.quant_params], dtype=torch.int32)
    return QuantizedLinear(layer.in_features, weight.tensor(), scales, zero_points, weight.outliers,
                           None if outlier_weight is None else outlier_weight.tensor(),
                           None if bias is None else bias.tensor(), mode, qmin, qmax)


def decode_model(data: bytes) -> EmissionModel:
    """Rebuild a model, quantized layers included, from container bytes"""
    metadata, record_list = read_container(data)
    if metadata.get('kind') != 'model':
        raise ContainerFormatError(f'Container holds a {metadata.get("kind")}, not a model')
    model = build_model(ModelConfig.from_metadata(metadata['config']), seed=metadata.get('seed') or 0)
    model.seed = metadata.get('seed')
    model.compression = metadata['compression']
    records = {r.name: r for r in record_list}
    mode = 'dynamic' if model.compression.get('scheme') == 'dynamic' else 'static'
    for name, layer in [(n, m) for n, m in model.named_modules() if isinstance(m, nn.Linear)]:
        weight = records.get(f'{name}.weight')
        if weight is not None and weight.dtype in ('u8', 'i8'):
            del records[f'{name}.weight']
            parent_name, _, child = name.rpartition('.')
            parent = model.get_submodule(parent_name) if parent_name else model
            setattr(parent, child, _quantized_layer(name, layer, weight, records, mode))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in records:
                raise ContainerFormatError(f'Container lacks tensor "{name}"')
            value = records.pop(name).tensor()
            if value.shape != p.shape:
                raise ContainerFormatError(f'Tensor "{name}" has shape {tuple(value.shape)}, model expects '
                                           f'{tuple(p.shape)}')
            p.copy_(value)
    if records:
        raise ContainerFormatError(f'Container holds unexpected tensors {sorted(records)}')
    return model


def save_model(model: nn.Module, path: PathLike) -> int:
    """Write a model container; returns the byte count"""
    data = encode_model(model)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path: PathLike) -> EmissionModel:
    """Read a model container"""
    return decode_model(Path(path).read_bytes())


#########################
# Datasets

def dataset_records(split: DatasetSplit) -> List[TensorRecord]:
    """Per split: concatenated (sum T, D) features, labels, and sequence lengths"""
    label_dtype = 'u8' if split.class_count <= 256 else 'i32'
    records = []
    for name in SPLIT_NAMES:
        sequences = split.sequences(name)
        if sequences:
            features = np.concatenate([s.features for s in sequences])
            labels = np.concatenate([s.labels for s in sequences])
        else:
            features = np.zeros((0, split.feature_dim), np.float32)
            labels = np.zeros(0, np.int64)
        records.append(TensorRecord(f'{name}.features', 'f32', features))
        records.append(TensorRecord(f'{name}.labels', label_dtype, labels))
        records.append(TensorRecord(f'{name}.lengths', 'i32', np.array([len(s) for s in sequences], np.int64)))
    if split.scaler is not None:
        records.append(TensorRecord('scaler.minimum', 'f64', split.scaler.minimum))
        records.append(TensorRecord('scaler.maximum', 'f64', split.scaler.maximum))
    return records


def encode_dataset(split: DatasetSplit) -> bytes:
    metadata = {'kind': 'dataset', 'class_count': split.class_count, 'feature_dim': split.feature_dim,
                'class_names': list(split.class_names), 'seed': split.seed}
    return encode_container(metadata, dataset_records(split))


def decode_dataset(data: bytes) -> DatasetSplit:
    metadata, record_list = read_container(data)
    if metadata.get('kind') != 'dataset':
        raise ContainerFormatError(f'Container holds a {metadata.get("kind")}, not a dataset')
    records = {r.name: r.array for r in record_list}
    splits = {}
    for name in SPLIT_NAMES:
        try:
            features, labels, lengths = (records[f'{name}.{part}'] for part in ('features', 'labels', 'lengths'))
        except KeyError as e:
            raise ContainerFormatError(f'Dataset container lacks {e}')
        bounds = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        splits[name] = [LabeledSequence(features[a:b].astype(np.float32), labels[a:b].astype(np.int64))
                        for a, b in zip(bounds[:-1], bounds[1:])]
    scaler = None
    if 'scaler.minimum' in records:
        scaler = ScalerParams(records['scaler.minimum'].astype(np.float64),
                              records['scaler.maximum'].astype(np.float64))
    return DatasetSplit(**splits, class_count=metadata['class_count'], feature_dim=metadata['feature_dim'],
                        class_names=tuple(metadata['class_names']), scaler=scaler, seed=metadata.get('seed'))


def save_dataset(split: DatasetSplit, path: PathLike) -> int:
    """Write a dataset container; returns the byte count"""
    data = encode_dataset(split)
    Path(path).write_bytes(data)
    return len(data)


def load_dataset(path: PathLike) -> DatasetSplit:
    """Read a dataset container"""
    return decode_dataset(Path(path).read_bytes())


def read_metadata(path: PathLike) -> Dict[str, Any]:
    """Metadata block of any container file"""
    return read_container(Path(path).read_bytes())[0]


def load_any_model(path: PathLike, expected_input_dim: Optional[int] = None) -> EmissionModel:
    """Load a model and optionally check it against a dataset's feature dimension"""
    model = load_model(path)
    if expected_input_dim is not None and model.config.input_dim != expected_input_dim:
        raise ContainerFormatError(f'{path}: model expects {model.config.input_dim} features, dataset has '
                                   f'{expected_input_dim}')
    return model
