from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from tinyloc.crf import CrfParams, crf_nll, viterbi_decode
from tinyloc.helper_functions import ShapeError, torch_generator
from tinyloc.nn_core import CausalConv1d, scaled_dot_attention, silu, sinusoidal_positions, xavier_init_

FAMILIES = ('mdcsa', 'mamba')
FAMILY_LABELS = {'mdcsa': 'MDCSA', 'mamba': 'Mamba'}
MDCSA_KERNEL_SETS = {1: (1,), 3: (1, 4, 7)}
"""Kernel sets behind the L1 and L3 MDCSA names"""

_NAME_PATTERN = re.compile(r'^\s*(mdcsa|mamba)\s*:\s*H(\d+)\s*L(\d+)\s*$', re.IGNORECASE)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one emission model

    For mdcsa, layer_spec is the set of causal kernel widths, one attention branch per width.
    For mamba, layer_spec is a one-element tuple holding the block count.
    """
    family: str
    hidden_size: int
    layer_spec: Tuple[int, ...]
    input_dim: int
    class_count: int
    state_dim: int = 16
    conv_width: int = 4
    expand: int = 2
    dt_rank: Optional[int] = None
    ffn_mult: int = 16

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f'Unknown model family "{self.family}", expected one of {FAMILIES}')
        object.__setattr__(self, 'layer_spec', tuple(int(v) for v in self.layer_spec))
        if self.hidden_size < 1:
            raise ValueError(f'hidden_size must be at least 1, got {self.hidden_size}')
        if self.input_dim < 1:
            raise ValueError(f'input_dim must be at least 1, got {self.input_dim}')
        if self.class_count < 2:
            raise ValueError(f'class_count must be at least 2, got {self.class_count}')
        if not self.layer_spec:
            raise ValueError('layer_spec must not be empty')
        if self.family == 'mdcsa':
            if any(k < 1 for k in self.layer_spec) or len(set(self.layer_spec)) != len(self.layer_spec):
                raise ValueError(f'MDCSA kernel sizes must be distinct and at least 1, got {self.layer_spec}')
            if self.ffn_mult < 1:
                raise ValueError(f'ffn_mult must be at least 1, got {self.ffn_mult}')
        else:
            if len(self.layer_spec) != 1 or self.layer_spec[0] < 1:
                raise ValueError(f'Mamba layer_spec must hold a single block count >= 1, got {self.layer_spec}')
            if self.expand < 1 or self.state_dim < 1 or self.conv_width < 1:
                raise ValueError(f'Invalid Mamba dims: expand={self.expand}, state_dim={self.state_dim}, '
                                 f'conv_width={self.conv_width}')
            if self.dt_rank is not None and self.dt_rank < 1:
                raise ValueError(f'dt_rank must be at least 1, got {self.dt_rank}')

    @property
    def layer_count(self) -> int:
        """The L in the model name: branch count for mdcsa, block count for mamba"""
        return len(self.layer_spec) if self.family == 'mdcsa' else self.layer_spec[0]

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.hidden_size / 16)

    @property
    def name(self) -> str:
        return f'{FAMILY_LABELS[self.family]}: H{self.hidden_size}L{self.layer_count}'

    @staticmethod
    def parse_name(text: str, input_dim: int, class_count: int, **overrides) -> ModelConfig:
        """Build a config from a short name such as 'mamba:H8L1' or 'MDCSA: H16L3'

        :param text: family and size name
        :param input_dim: feature dimension D
        :param class_count: number of classes K
        :param overrides: any other ModelConfig fields
        :return: the corresponding ModelConfig
        """
        match = _NAME_PATTERN.match(text)
        if not match:
            raise ValueError(f'Cannot parse model name "{text}", expected e.g. "mamba:H8L1"')
        family, hidden, layers = match.group(1).lower(), int(match.group(2)), int(match.group(3))
        if family == 'mdcsa':
            if layers not in MDCSA_KERNEL_SETS:
                raise ValueError(f'MDCSA names support L in {sorted(MDCSA_KERNEL_SETS)}, got L{layers}')
            layer_spec = MDCSA_KERNEL_SETS[layers]
        else:
            layer_spec = (layers,)
        return ModelConfig(family, hidden, layer_spec, input_dim, class_count, **overrides)

    def with_dims(self, input_dim: int, class_count: int) -> ModelConfig:
        """Same architecture for another dataset shape"""
        return replace(self, input_dim=input_dim, class_count=class_count)

    def to_metadata(self) -> Dict[str, Any]:
        values = asdict(self)
        values['layer_spec'] = list(self.layer_spec)
        return values

    @staticmethod
    def from_metadata(values: Dict[str, Any]) -> ModelConfig:
        return ModelConfig(**{**values, 'layer_spec': tuple(values['layer_spec'])})


class EmissionModel(nn.Module):
    """Network mapping (..., T, D) RSSI features to (..., T, K) emission scores, with its CRF head"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.crf = CrfParams(config.class_count)
        # Set by the quantize and distill modules, carried into container metadata
        self.compression: Dict[str, Any] = {'variant': 'baseline'}
        self.seed: Optional[int] = None

    def _check_input(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError(f'{self.config.name} expects input_dim={self.config.input_dim}, '
                             f'got trailing dim {x.shape[-1]}')
        if x.dim() < 2 or x.shape[-2] < 1:
            raise ShapeError(f'Expected input of shape (..., T, D) with T >= 1, got {tuple(x.shape)}')

    def emissions(self, x: torch.Tensor) -> torch.Tensor:
        """Per-timestep class scores"""
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.emissions(x)

    def loss(self, x: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Mean CRF negative log-likelihood over the batch"""
        return crf_nll(self(x), labels, self.crf)

    def decode(self, x: torch.Tensor) -> torch.Tensor:
        """Viterbi labels for each timestep"""
        return viterbi_decode(self(x), self.crf)


#########################
# MDCSA: causal convolutional self-attention branches, one per kernel width

class DCSABranch(nn.Module):
    """Self-attention with causal-conv queries and keys, a gated dual-conv merge, and a feed-forward block"""

    def __init__(self, hidden_size: int, kernel_size: int, ffn_mult: int):
        super().__init__()
        self.kernel_size = kernel_size
        self.query = CausalConv1d(hidden_size, hidden_size, kernel_size)
        # key bias shifts every score in a row equally, so softmax ignores it
        self.key = CausalConv1d(hidden_size, hidden_size, kernel_size, bias=False)
        self.value = nn.Linear(hidden_size, hidden_size)
        self.attention_out = nn.Linear(hidden_size, hidden_size)
        self.merge_value = CausalConv1d(hidden_size, hidden_size, kernel_size)
        self.merge_gate = CausalConv1d(hidden_size, hidden_size, kernel_size)
        self.merge_norm = nn.LayerNorm(hidden_size)
        self.ffn_in = nn.Linear(hidden_size, ffn_mult * hidden_size)
        self.ffn_out = nn.Linear(ffn_mult * hidden_size, hidden_size)
        self.ffn_norm = nn.LayerNorm(hidden_size)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        attended = self.attention_out(scaled_dot_attention(self.query(h), self.key(h), self.value(h)))
        merged = self.merge_value(attended) * torch.sigmoid(self.merge_gate(attended))
        h = self.merge_norm(h + merged)
        return self.ffn_norm(h + self.ffn_out(silu(self.ffn_in(h))))


class MDCSA(EmissionModel):
    """Spatial embedding plus sinusoidal temporal embedding, averaged DCSA branches, linear head"""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        h = config.hidden_size
        self.spatial = nn.Linear(config.input_dim, h)
        self.temporal = nn.Linear(h, h)
        self.branches = nn.ModuleList(DCSABranch(h, k, config.ffn_mult) for k in config.layer_spec)
        self.head = nn.Linear(h, config.class_count)

    def emissions(self, x: torch.Tensor) -> torch.Tensor:
        positions = sinusoidal_positions(x.shape[-2], self.config.hidden_size, dtype=x.dtype)
        h = self.spatial(x) + self.temporal(positions)
        return self.head(torch.stack([branch(h) for branch in self.branches]).mean(dim=0))


def build_mdcsa(cfg: ModelConfig, seed: int = 0) -> MDCSA:
    """Build a seeded MDCSA emission model with its CRF head"""
    if cfg.family != 'mdcsa':
        raise ValueError(f'build_mdcsa needs family "mdcsa", got "{cfg.family}"')
    model = MDCSA(cfg)
    model.seed = seed
    generator = torch_generator(seed, 'init')
    xavier_init_(model, generator)
    model.crf.reset_parameters(generator)
    return model


#########################
# Mamba: selective state-space blocks

def selective_ssm_scan(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor, C: torch.Tensor,
                       D: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Sequential selective scan h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t, y_t = C_t h_t + D x_t

    :param delta: positive step sizes, (..., T, channels)
    :param A: state matrix, (channels, N)
    :param B: input maps, (..., T, N)
    :param C: output maps, (..., T, N)
    :param D: skip weights, (channels,)
    :param x: input stream, (..., T, channels)
    :return: output stream, (..., T, channels)
    """
    a_bar = torch.exp(delta.unsqueeze(-1) * A)
    bx = delta.unsqueeze(-1) * B.unsqueeze(-2) * x.unsqueeze(-1)
    h = torch.zeros_like(a_bar[..., 0, :, :])
    outputs = []
    for t in range(x.shape[-2]):
        h = a_bar[..., t, :, :] * h + bx[..., t, :, :]
        outputs.append((h * C[..., t, :].unsqueeze(-2)).sum(-1))
    return torch.stack(outputs, dim=-2) + x * D


class MambaBlock(nn.Module):
    """Gated selective-SSM block with residual connection and layer norm"""

    def __init__(self, hidden_size: int, state_dim: int, conv_width: int, expand: int, dt_rank: int):
        super().__init__()
        inner = expand * hidden_size
        self.state_dim = state_dim
        self.dt_rank = dt_rank
        self.in_proj = nn.Linear(hidden_size, 2 * inner, bias=False)
        self.conv = CausalConv1d(inner, inner, conv_width, groups=inner)
        self.x_proj = nn.Linear(inner, dt_rank + 2 * state_dim, bias=False)
        self.dt_proj = nn.Linear(dt_rank, inner)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32)).repeat(inner, 1))
        self.D = nn.Parameter(torch.ones(inner))
        self.out_proj = nn.Linear(inner, hidden_size, bias=False)
        self.norm = nn.LayerNorm(hidden_size)

    def reset_dt_bias(self, generator: torch.Generator, dt_min: float = 1e-3, dt_max: float = 1e-1) -> None:
        """Initialize the step-size bias so softplus(bias) is log-uniform in [dt_min, dt_max]"""
        with torch.no_grad():
            u = torch.rand(self.dt_proj.bias.shape, generator=generator)
            dt = torch.exp(u * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        stream, gate = self.in_proj(h).chunk(2, dim=-1)
        stream = silu(self.conv(stream))
        dt, B, C = self.x_proj(stream).split([self.dt_rank, self.state_dim, self.state_dim], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        y = selective_ssm_scan(delta, -torch.exp(self.A_log), B, C, self.D, stream)
        return self.norm(h + self.out_proj(y * silu(gate)))


class Mamba(EmissionModel):
    """Linear embedding, a stack of Mamba blocks, linear head"""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        h = config.hidden_size
        self.embed = nn.Linear(config.input_dim, h)
        self.blocks = nn.ModuleList(
            MambaBlock(h, config.state_dim, config.conv_width, config.expand, config.resolved_dt_rank)
            for _ in range(config.layer_spec[0]))
        self.head = nn.Linear(h, config.class_count)

    def emissions(self, x: torch.Tensor) -> torch.Tensor:
        h = self.embed(x)
        for block in self.blocks:
            h = block(h)
        return self.head(h)


def build_mamba(cfg: ModelConfig, seed: int = 0) -> Mamba:
    """Build a seeded Mamba emission model with its CRF head"""
    if cfg.family != 'mamba':
        raise ValueError(f'build_mamba needs family "mamba", got "{cfg.family}"')
    model = Mamba(cfg)
    model.seed = seed
    generator = torch_generator(seed, 'init')
    xavier_init_(model, generator)
    model.crf.reset_parameters(generator)
    for block in model.blocks:
        block.reset_dt_bias(generator)
    return model


def build_model(cfg: ModelConfig, seed: int = 0) -> EmissionModel:
    """Build the model family named by cfg"""
    builders = {'mdcsa': build_mdcsa, 'mamba': build_mamba}
    return builders[cfg.family](cfg, seed)


def param_count(model: nn.Module) -> int:
    """Number of trainable elements; quantized layers count their original weight and bias elements"""
    total = 0
    for module in model.modules():
        logical = getattr(module, 'logical_param_count', None)
        if logical is not None:
            total += logical
        else:
            total += sum(p.numel() for p in module.parameters(recurse=False))
    return total
