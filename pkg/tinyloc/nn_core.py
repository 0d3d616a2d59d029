from __future__ import annotations

import logging
import math
from typing import Callable, Iterable, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from tinyloc.helper_functions import ShapeError, TrainingDivergedError

DTYPES = {
    'fp64': torch.float64,
    'fp32': torch.float32,
    'fp16': torch.float16,
    'u8': torch.uint8,
}
"""Tensor dtypes used across tinyloc, keyed by their short names"""

LAYER_NORM_EPS = 1e-5


#########################
# Layer primitives

def linear(x: torch.Tensor, layer: nn.Linear) -> torch.Tensor:
    """Affine map y = x W^T + b

    :param x: input of shape (..., in_features)
    :param layer: linear layer supplying weight and optional bias
    :return: output of shape (..., out_features)
    """
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f'linear expects trailing dim in_features={layer.in_features}, got {x.shape[-1]} '
                         f'(input shape {tuple(x.shape)})')
    return F.linear(x, layer.weight, layer.bias)


def causal_conv1d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
                  groups: int = 1) -> torch.Tensor:
    """1-D convolution over time whose output at t sees only inputs at positions <= t

    :param x: input of shape (T, C) or (B, T, C)
    :param weight: kernel of shape (C_out, C / groups, k)
    :param bias: optional bias of shape (C_out,)
    :param groups: convolution groups; groups = C gives a depthwise convolution
    :return: output of shape (T, C_out) or (B, T, C_out)
    """
    k = weight.shape[-1]
    if k <= 0:
        raise ShapeError(f'causal_conv1d kernel width must be at least 1, got {k}')
    if x.shape[-1] != weight.shape[1] * groups:
        raise ShapeError(f'causal_conv1d expects {weight.shape[1] * groups} channels, got {x.shape[-1]}')
    unbatched = x.dim() == 2
    if unbatched:
        x = x.unsqueeze(0)
    # (B, T, C) -> (B, C, T), left pad k - 1 zeros so no future sample leaks in
    padded = F.pad(x.transpose(1, 2), (k - 1, 0))
    y = F.conv1d(padded, weight, bias, groups=groups).transpose(1, 2)
    return y.squeeze(0) if unbatched else y


class CausalConv1d(nn.Conv1d):
    """Conv1d over (..., T, C) sequences with causal left padding"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, bias: bool = True, groups: int = 1):
        if kernel_size <= 0:
            raise ShapeError(f'kernel size must be at least 1, got {kernel_size}')
        super().__init__(in_channels, out_channels, kernel_size, bias=bias, groups=groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return causal_conv1d(x, self.weight, self.bias, groups=self.groups)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         return_weights: bool = False):
    """Causally masked scaled dot-product attention

    :param q: queries of shape (..., T, H)
    :param k: keys of shape (..., T, H)
    :param v: values of shape (..., T, H)
    :param return_weights: also return the (..., T, T) attention weights
    :return: attended values of shape (..., T, H)
    """
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f'attention shapes do not match: q {tuple(q.shape)}, k {tuple(k.shape)}, '
                         f'v {tuple(v.shape)}')
    t = q.shape[-2]
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    future = torch.triu(torch.ones(t, t, dtype=torch.bool, device=q.device), diagonal=1)
    weights = softmax(scores.masked_fill(future, float('-inf')))
    out = weights @ v
    return (out, weights) if return_weights else out


def silu(x: torch.Tensor) -> torch.Tensor:
    """x * sigmoid(x)"""
    return F.silu(x)


def layer_norm(x: torch.Tensor, eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """Normalize the trailing dimension to zero mean and unit variance"""
    return F.layer_norm(x, (x.shape[-1],), eps=eps)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax along dim"""
    return torch.softmax(x, dim=dim)


def sinusoidal_positions(length: int, hidden_size: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed sin/cos temporal encoding of shape (length, hidden_size)"""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, hidden_size, 2, dtype=torch.float64) * (-math.log(10000.0) / hidden_size))
    encoding = torch.zeros(length, hidden_size, dtype=torch.float64)
    encoding[:, 0::2] = torch.sin(position * div)
    encoding[:, 1::2] = torch.cos(position * div)[:, :hidden_size // 2]
    return encoding.to(dtype)


def xavier_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded uniform Xavier init for every linear and conv weight in module, zeros for their biases"""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            w = m.weight
            receptive = w[0][0].numel() if w.dim() > 2 else 1
            fan_in, fan_out = w.shape[1] * receptive, w.shape[0] * receptive
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            with torch.no_grad():
                w.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


#########################
# Optimizer

class CheckedAdam(torch.optim.Adam):
    """Adam that refuses to step when any gradient is non-finite

    The optimizer's per-parameter state holds the first and second moment estimates and the step counter.
    """

    def __init__(self, named_parameters: Iterable[Tuple[str, nn.Parameter]], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        named = [(n, p) for n, p in named_parameters if p.requires_grad]
        self.parameter_names = {id(p): n for n, p in named}
        super().__init__([p for _, p in named], lr=lr, betas=betas, eps=eps)

    @torch.no_grad()
    def step(self, closure: Optional[Callable] = None):
        for group in self.param_groups:
            for p in group['params']:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    name = self.parameter_names.get(id(p), '<unnamed>')
                    raise TrainingDivergedError(f'Non-finite gradient in parameter "{name}"')
        return super().step(closure)


OptimizerState = CheckedAdam


def adam_step(params: Sequence[nn.Parameter], grads: Sequence[torch.Tensor], state: OptimizerState) -> None:
    """Apply one bias-corrected Adam update to params using the given gradients

    :param params: parameters managed by state
    :param grads: gradients, one per parameter
    :param state: optimizer holding learning rate, moments, and step counter
    """
    for p, g in zip(params, grads):
        p.grad = g
    state.step()


#########################
# Gradient verification

def grad_check(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-3,
               samples: int = 200, order: int = 4, generator: Optional[torch.Generator] = None) -> float:
    """Compare autograd gradients against central finite differences

    :param loss_fn: zero-argument callable returning a scalar loss; evaluated in fp64
    :param params: leaf tensors requiring grad
    :param eps: finite-difference step
    :param samples: number of coordinates to check; all coordinates if there are fewer
    :param order: 2 for the two-point central stencil, 4 for the five-point one
    :param generator: source of randomness for coordinate sampling
    :return: max over checked coordinates of |a - n| / max(|a|, |n|, 1e-8)
    """
    params = list(params)
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]
    coordinates = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if len(coordinates) > samples:
        chosen = torch.randperm(len(coordinates), generator=generator)[:samples].tolist()
        coordinates = [coordinates[c] for c in sorted(chosen)]

    worst = 0.0
    with torch.no_grad():
        for i, j in coordinates:
            flat = params[i].detach().view(-1)
            original = flat[j].item()

            def loss_at(delta: float) -> float:
                flat[j] = original + delta
                return float(loss_fn())

            if order == 2:
                numeric = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
            elif order == 4:
                numeric = (-loss_at(2 * eps) + 8 * loss_at(eps) - 8 * loss_at(-eps) + loss_at(-2 * eps)) / (12 * eps)
            else:
                raise ValueError(f'Unsupported finite-difference order {order}')
            flat[j] = original
            a = analytic[i].view(-1)[j].item()
            error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if error > worst:
                logging.debug(f'grad_check: parameter {i} coordinate {j} analytic={a} numeric={numeric}')
                worst = error
    return worst
