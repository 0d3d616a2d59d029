from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from tinyloc.helper_functions import AlreadyQuantizedError, ConfigError, QuantizationError, ShapeError

UNSIGNED_RANGE = (0, 255)
SIGNED_RANGE = (-128, 127)
DEFAULT_TAU = 6.0
RANGE_EPS = 1e-8
SCHEMES = ('static', 'dynamic')


@dataclass(frozen=True)
class QuantParams:
    """Affine mapping between reals and integer codes: x ~ (q - zero_point) * scale"""
    scale: float
    zero_point: int
    qmin: int = UNSIGNED_RANGE[0]
    qmax: int = UNSIGNED_RANGE[1]

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantizationError(f'Quantization scale must be positive, got {self.scale}')
        if not self.qmin <= self.zero_point <= self.qmax:
            raise QuantizationError(f'zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]')


@dataclass(frozen=True)
class QuantConfig:
    """How to quantize a trained model"""
    scheme: str = 'static'
    tau: float = DEFAULT_TAU
    signed: bool = False
    calibration_sequences: int = 64

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f'Unknown quantization scheme "{self.scheme}", expected one of {SCHEMES}')
        if self.scheme == 'static' and not self.tau > 0:
            raise ConfigError(f'Outlier threshold tau must be positive, got {self.tau}')
        if self.calibration_sequences < 1:
            raise ConfigError(f'calibration_sequences must be at least 1, got {self.calibration_sequences}')


def code_range(signed: bool = False) -> Tuple[int, int]:
    """Integer code bounds: [0, 255] by default, [-128, 127] when signed"""
    return SIGNED_RANGE if signed else UNSIGNED_RANGE


def code_dtype(qmin: int) -> torch.dtype:
    return torch.int8 if qmin < 0 else torch.uint8


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, halves away from zero"""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def affine_params(min_float: float, max_float: float, qmin: int = UNSIGNED_RANGE[0],
                  qmax: int = UNSIGNED_RANGE[1]) -> QuantParams:
    """Scale and zero point mapping [min_float, max_float] onto [qmin, qmax]

    :param min_float: lowest real value to represent
    :param max_float: highest real value to represent
    :param qmin: lowest integer code
    :param qmax: highest integer code
    :return: parameters with zero_point clamped into [qmin, qmax]
    """
    if not max_float > min_float:
        raise QuantizationError(f'Degenerate quantization range [{min_float}, {max_float}]')
    if not qmax > qmin:
        raise QuantizationError(f'Degenerate code range [{qmin}, {qmax}]')
    scale = (max_float - min_float) / (qmax - qmin)
    # qmin - min / scale, written without dividing by the rounded scale
    offset = qmin - min_float * (qmax - qmin) / (max_float - min_float)
    zero_point = int(math.copysign(math.floor(abs(offset) + 0.5), offset))
    return QuantParams(scale, min(max(zero_point, qmin), qmax), qmin, qmax)


def _quantize(x: torch.Tensor, scale: torch.Tensor, zero_point: torch.Tensor, qmin: int, qmax: int) -> torch.Tensor:
    codes = round_half_away(x.double() / scale.double() + zero_point.double())
    return codes.clamp(qmin, qmax).to(code_dtype(qmin))


def _dequantize(q: torch.Tensor, scale: torch.Tensor, zero_point: torch.Tensor) -> torch.Tensor:
    return ((q.double() - zero_point.double()) * scale.double()).float()


def quantize_tensor(x: torch.Tensor, qp: QuantParams) -> torch.Tensor:
    """Q = clamp(round(x / scale + zero_point), qmin, qmax) as uint8, or int8 for signed ranges"""
    return _quantize(x, torch.tensor(qp.scale, dtype=torch.float64), torch.tensor(qp.zero_point), qp.qmin, qp.qmax)


def dequantize(q: torch.Tensor, qp: QuantParams) -> torch.Tensor:
    """(q - zero_point) * scale as fp32"""
    return _dequantize(q, torch.tensor(qp.scale, dtype=torch.float64), torch.tensor(qp.zero_point))


def range_params(lo: torch.Tensor, hi: torch.Tensor, qmin: int, qmax: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Vectorized affine_params over ranges widened to include 0; returns fp32 scales and int32 zero points

    Ranges narrower than RANGE_EPS are widened to RANGE_EPS.
    """
    lo = torch.clamp(lo.double(), max=0.0)
    hi = torch.clamp(hi.double(), min=0.0)
    hi = torch.where(hi - lo < RANGE_EPS, lo + RANGE_EPS, hi)
    scale = (hi - lo) / (qmax - qmin)
    zero_point = round_half_away(qmin - lo * (qmax - qmin) / (hi - lo)).clamp(qmin, qmax)
    return scale.float(), zero_point.to(torch.int32)


def detect_outlier_columns(calibration_activations: torch.Tensor, tau: float) -> List[int]:
    """Input columns whose calibration magnitude reaches tau

    :param calibration_activations: (..., in_features) activations seen by a layer
    :param tau: outlier threshold
    :return: sorted column indices j with max |a_j| >= tau
    """
    if calibration_activations.numel() == 0:
        raise QuantizationError('Static quantization requires a non-empty calibration set')
    flat = calibration_activations.detach().reshape(-1, calibration_activations.shape[-1])
    peak = flat.abs().amax(dim=0)
    return torch.nonzero(peak >= tau).flatten().tolist()


class QuantizedLinear(nn.Module):
    """Linear layer with integer-coded weights

    Static mode holds one (scale, zero_point) pair per output row over the non-outlier columns and keeps outlier
    columns at fp16. Dynamic mode holds a single pair for the whole matrix and quantizes activations per call.
    """

    def __init__(self, in_features: int, qweight: torch.Tensor, scales: torch.Tensor, zero_points: torch.Tensor,
                 outlier_columns: Sequence[int], outlier_weight: Optional[torch.Tensor],
                 bias: Optional[torch.Tensor], mode: str = 'static', qmin: int = UNSIGNED_RANGE[0],
                 qmax: int = UNSIGNED_RANGE[1]):
        super().__init__()
        if mode not in SCHEMES:
            raise QuantizationError(f'Unknown quantized layer mode "{mode}"')
        outliers = sorted(set(int(c) for c in outlier_columns))
        if outliers and (outliers[0] < 0 or outliers[-1] >= in_features):
            raise QuantizationError(f'Outlier columns {outliers} outside [0, {in_features})')
        if qweight.shape[1] != in_features - len(outliers):
            raise ShapeError(f'Quantized payload has {qweight.shape[1]} columns, expected '
                             f'{in_features - len(outliers)}')
        self.in_features = in_features
        self.out_features = qweight.shape[0]
        self.mode = mode
        self.qmin, self.qmax = qmin, qmax
        inliers = [c for c in range(in_features) if c not in set(outliers)]
        self.register_buffer('qweight', qweight.to(code_dtype(qmin)))
        self.register_buffer('scales', scales.float())
        self.register_buffer('zero_points', zero_points.to(torch.int32))
        self.register_buffer('outlier_columns', torch.tensor(outliers, dtype=torch.long))
        self.register_buffer('inlier_columns', torch.tensor(inliers, dtype=torch.long))
        if outlier_weight is None:
            outlier_weight = torch.zeros(self.out_features, 0)
        self.register_buffer('outlier_weight', outlier_weight.half())
        self.register_buffer('bias', None if bias is None else bias.detach().float())

    @property
    def logical_param_count(self) -> int:
        """Element count of the fp32 weight and bias this layer replaced"""
        return self.in_features * self.out_features + (0 if self.bias is None else self.bias.numel())

    def extra_repr(self) -> str:
        return (f'in_features={self.in_features}, out_features={self.out_features}, mode={self.mode}, '
                f'outliers={self.outlier_columns.numel()}, range=[{self.qmin}, {self.qmax}]')

    def dequantized_inliers(self) -> torch.Tensor:
        """fp32 reconstruction of the integer-coded columns"""
        scale = self.scales.view(-1, 1)
        zero_point = self.zero_points.view(-1, 1)
        return _dequantize(self.qweight, scale, zero_point)

    def dequantized_weight(self) -> torch.Tensor:
        """fp32 reconstruction of the full out x in weight matrix"""
        weight = torch.zeros(self.out_features, self.in_features)
        if self.inlier_columns.numel():
            weight[:, self.inlier_columns] = self.dequantized_inliers()
        if self.outlier_columns.numel():
            weight[:, self.outlier_columns] = self.outlier_weight.float()
        return weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return mixed_matmul(self, x)


def static_quantize_linear(layer: nn.Linear, calibration: torch.Tensor, tau: float = DEFAULT_TAU,
                           signed: bool = False) -> QuantizedLinear:
    """Outlier-aware vector-wise quantization of one linear layer

    :param layer: fp32 linear layer
    :param calibration: activations fed to the layer, (..., in_features)
    :param tau: outlier threshold on calibration magnitudes
    :param signed: use the [-128, 127] code range
    :return: quantized replacement
    """
    if calibration.shape[-1] != layer.in_features:
        raise ShapeError(f'Calibration activations have {calibration.shape[-1]} features, layer expects '
                         f'{layer.in_features}')
    outliers = detect_outlier_columns(calibration, tau)
    if len(outliers) == layer.in_features:
        logging.warning(f'All {layer.in_features} input columns are outliers at tau={tau}; layer stays fp16')
    qmin, qmax = code_range(signed)
    weight = layer.weight.detach().float()
    inliers = [c for c in range(layer.in_features) if c not in set(outliers)]
    inlier_weight = weight[:, inliers]
    if inliers:
        scales, zero_points = range_params(inlier_weight.amin(dim=1), inlier_weight.amax(dim=1), qmin, qmax)
        qweight = _quantize(inlier_weight, scales.view(-1, 1), zero_points.view(-1, 1), qmin, qmax)
    else:
        scales, zero_points = torch.zeros(0), torch.zeros(0, dtype=torch.int32)
        qweight = torch.zeros(layer.out_features, 0, dtype=code_dtype(qmin))
    return QuantizedLinear(layer.in_features, qweight, scales, zero_points, outliers, weight[:, outliers],
                           layer.bias, 'static', qmin, qmax)


def dynamic_quantize_linear(layer: nn.Linear, signed: bool = False) -> QuantizedLinear:
    """Tensor-wise quantization of one linear layer's weight"""
    qmin, qmax = code_range(signed)
    weight = layer.weight.detach().float()
    scales, zero_points = range_params(weight.min().view(1), weight.max().view(1), qmin, qmax)
    qweight = _quantize(weight, scales, zero_points, qmin, qmax)
    return QuantizedLinear(layer.in_features, qweight, scales, zero_points, [], None, layer.bias,
                           'dynamic', qmin, qmax)


def mixed_matmul(qlinear: QuantizedLinear, x: torch.Tensor) -> torch.Tensor:
    """Apply a quantized layer to x of shape (..., in_features)

    Static: dequantized int8 product over inlier columns plus fp16-weight product over outlier columns plus bias.
    Dynamic: x is quantized with its own per-call range, multiplied in integers, then rescaled.
    """
    if x.shape[-1] != qlinear.in_features:
        raise ShapeError(f'Quantized linear expects in_features={qlinear.in_features}, got {x.shape[-1]}')
    if qlinear.mode == 'dynamic':
        x_scale, x_zero = range_params(x.detach().min().view(1), x.detach().max().view(1), qlinear.qmin,
                                       qlinear.qmax)
        xq = _quantize(x, x_scale, x_zero, qlinear.qmin, qlinear.qmax)
        acc = (xq.double() - x_zero.double()) @ (qlinear.qweight.double() - qlinear.zero_points.double()).T
        out = (acc * (x_scale.double() * qlinear.scales.double())).to(x.dtype)
        return out if qlinear.bias is None else out + qlinear.bias.to(x.dtype)

    bias = None if qlinear.bias is None else qlinear.bias.to(x.dtype)
    has_outliers = qlinear.outlier_columns.numel() > 0
    out = None
    if qlinear.inlier_columns.numel():
        x_in = x.index_select(-1, qlinear.inlier_columns) if has_outliers else x
        out = F.linear(x_in, qlinear.dequantized_inliers().to(x.dtype), bias)
    if has_outliers:
        outlier_part = F.linear(x.index_select(-1, qlinear.outlier_columns), qlinear.outlier_weight.to(x.dtype))
        if out is None:
            out = outlier_part if bias is None else outlier_part + bias
        else:
            out = out + outlier_part
    return out


def weight_reconstruction_error(weight: torch.Tensor, per_row: bool, signed: bool = False) -> torch.Tensor:
    """Per-row max absolute error after quantize then dequantize

    :param weight: (out, in) fp32 weight
    :param per_row: vector-wise parameters when true, one tensor-wise pair otherwise
    :param signed: use the signed code range
    :return: (out,) max |w - dequant(quant(w))| per row
    """
    qmin, qmax = code_range(signed)
    if per_row:
        scales, zero_points = range_params(weight.amin(dim=1), weight.amax(dim=1), qmin, qmax)
        scales, zero_points = scales.view(-1, 1), zero_points.view(-1, 1)
    else:
        scales, zero_points = range_params(weight.min().view(1), weight.max().view(1), qmin, qmax)
    restored = _dequantize(_quantize(weight, scales, zero_points, qmin, qmax), scales, zero_points)
    return (weight - restored).abs().amax(dim=1)


def quantization_error_report(layer: nn.Linear, qlayer: QuantizedLinear) -> torch.Tensor:
    """Per-row max absolute difference between a float layer and its quantized replacement"""
    if (qlayer.out_features, qlayer.in_features) != tuple(layer.weight.shape):
        raise ShapeError(f'Quantized layer is {qlayer.out_features}x{qlayer.in_features}, float layer is '
                         f'{layer.weight.shape[0]}x{layer.weight.shape[1]}')
    return (layer.weight.detach().float() - qlayer.dequantized_weight()).abs().amax(dim=1)


#########################
# Whole-model transforms

def is_quantized(model: nn.Module) -> bool:
    """True if any layer of model is already quantized"""
    return any(isinstance(m, QuantizedLinear) for m in model.modules())


def _linear_layers(model: nn.Module) -> List[Tuple[str, nn.Linear]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, nn.Linear)]


def _replace_module(root: nn.Module, name: str, replacement: nn.Module) -> None:
    parent_name, _, child = name.rpartition('.')
    setattr(root.get_submodule(parent_name) if parent_name else root, child, replacement)


def _compression_record(model: nn.Module, scheme: str, **details) -> Dict:
    previous = dict(getattr(model, 'compression', {'variant': 'baseline'}))
    distilled = previous.get('variant') == 'distill'
    previous.update(details)
    previous['scheme'] = scheme
    previous['variant'] = f'distill_{scheme}_quant' if distilled else f'{scheme}_quant'
    return previous


def quantize_model_static(model: nn.Module, calibration_data: torch.Tensor, tau: float = DEFAULT_TAU,
                          signed: bool = False) -> nn.Module:
    """Copy of model with every nn.Linear replaced by an outlier-aware static QuantizedLinear

    :param model: trained fp32 model
    :param calibration_data: (N, T, D) training features driving the calibration pass
    :param tau: outlier threshold
    :param signed: use the signed code range
    :return: quantized copy; model itself is untouched
    """
    if is_quantized(model):
        raise AlreadyQuantizedError('Model already holds quantized layers; quantize the baseline instead')
    if not _linear_layers(model):
        logging.info('Model has no linear layers; nothing to quantize')
        return model
    quantized = copy.deepcopy(model)
    quantized.eval()
    captured: Dict[str, List[torch.Tensor]] = {name: [] for name, _ in _linear_layers(quantized)}
    hooks = []
    for name, layer in _linear_layers(quantized):
        def capture(module, inputs, name=name):
            captured[name].append(inputs[0].detach().reshape(-1, module.in_features))
        hooks.append(layer.register_forward_pre_hook(capture))
    try:
        with torch.no_grad():
            quantized(calibration_data)
    finally:
        for hook in hooks:
            hook.remove()
    for name, layer in _linear_layers(quantized):
        activations = torch.cat(captured[name]) if captured[name] else torch.zeros(0, layer.in_features)
        _replace_module(quantized, name, static_quantize_linear(layer, activations, tau, signed))
        logging.debug(f'Static-quantized {name}: {layer.out_features}x{layer.in_features}')
    quantized.compression = _compression_record(model, 'static', tau=tau, signed=signed)
    return quantized


def dynamic_quantize_model(model: nn.Module, signed: bool = False) -> nn.Module:
    """Copy of model with every nn.Linear weight quantized tensor-wise; activations quantize per call

    A model without linear layers is returned as is.
    """
    if is_quantized(model):
        raise AlreadyQuantizedError('Model already holds quantized layers; quantize the baseline instead')
    if not _linear_layers(model):
        logging.info('Model has no linear layers; nothing to quantize')
        return model
    quantized = copy.deepcopy(model)
    for name, layer in _linear_layers(quantized):
        _replace_module(quantized, name, dynamic_quantize_linear(layer, signed))
    quantized.compression = _compression_record(model, 'dynamic', signed=signed)
    return quantized


def quantize_model(model: nn.Module, quant_cfg: QuantConfig, calibration_data: Optional[torch.Tensor] = None) \
        -> nn.Module:
    """Dispatch on quant_cfg.scheme"""
    if quant_cfg.scheme == 'dynamic':
        return dynamic_quantize_model(model, quant_cfg.signed)
    if calibration_data is None:
        raise QuantizationError('Static quantization requires calibration data')
    return quantize_model_static(model, calibration_data[:quant_cfg.calibration_sequences], quant_cfg.tau,
                                 quant_cfg.signed)
