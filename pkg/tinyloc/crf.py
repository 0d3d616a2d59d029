from __future__ import annotations

from typing import Optional, Tuple

import torch
from torch import nn


class CrfParams(nn.Module):
    """Linear-chain CRF head: K x K transition scores plus learned start and end scores

    transitions[i, j] scores moving from class i at t - 1 to class j at t.
    """

    def __init__(self, class_count: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        if class_count < 1:
            raise ValueError(f'CRF needs at least one class, got {class_count}')
        self.class_count = class_count
        self.transitions = nn.Parameter(torch.zeros(class_count, class_count))
        self.start = nn.Parameter(torch.zeros(class_count))
        self.end = nn.Parameter(torch.zeros(class_count))
        if generator is not None:
            self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Seeded uniform init in [-0.1, 0.1]"""
        with torch.no_grad():
            for p in (self.transitions, self.start, self.end):
                p.uniform_(-0.1, 0.1, generator=generator)

    def extra_repr(self) -> str:
        return f'class_count={self.class_count}'


def _batched(emissions: torch.Tensor, labels: Optional[torch.Tensor] = None) \
        -> Tuple[torch.Tensor, Optional[torch.Tensor], bool]:
    if emissions.dim() == 2:
        return emissions.unsqueeze(0), None if labels is None else labels.unsqueeze(0), True
    if emissions.dim() != 3:
        raise ValueError(f'Emissions must be (T, K) or (B, T, K), got shape {tuple(emissions.shape)}')
    return emissions, labels, False


def _check_labels(labels: torch.Tensor, emissions: torch.Tensor) -> None:
    if labels.shape != emissions.shape[:-1]:
        raise ValueError(f'Labels shape {tuple(labels.shape)} does not match emissions {tuple(emissions.shape)}')
    k = emissions.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f'Label out of range [0, {k}): found values {labels.min().item()}..{labels.max().item()}')


def path_score(emissions: torch.Tensor, labels: torch.Tensor, params: CrfParams) -> torch.Tensor:
    """Unnormalized score of a label path: start + emissions + transitions + end

    :param emissions: (T, K) or (B, T, K)
    :param labels: (T,) or (B, T) class ids
    :param params: CRF parameters
    :return: scalar or (B,) scores
    """
    e, y, squeeze = _batched(emissions, labels)
    _check_labels(y, e)
    y = y.long()
    emitted = e.gather(2, y.unsqueeze(-1)).squeeze(-1).sum(1)
    moved = params.transitions[y[:, :-1], y[:, 1:]].sum(1)
    score = params.start[y[:, 0]] + emitted + moved + params.end[y[:, -1]]
    return score[0] if squeeze else score


def _forward_scores(e: torch.Tensor, params: CrfParams) -> torch.Tensor:
    """Log forward variables alpha of shape (B, T, K)"""
    alpha = [params.start + e[:, 0]]
    for t in range(1, e.shape[1]):
        alpha.append(torch.logsumexp(alpha[-1].unsqueeze(2) + params.transitions, dim=1) + e[:, t])
    return torch.stack(alpha, dim=1)


def _backward_scores(e: torch.Tensor, params: CrfParams) -> torch.Tensor:
    """Log backward variables beta of shape (B, T, K), end scores included"""
    beta = [params.end.expand(e.shape[0], -1)]
    for t in range(e.shape[1] - 2, -1, -1):
        beta.append(torch.logsumexp(params.transitions + (e[:, t + 1] + beta[-1]).unsqueeze(1), dim=2))
    return torch.stack(beta[::-1], dim=1)


def forward_logZ(emissions: torch.Tensor, params: CrfParams) -> torch.Tensor:
    """Log partition function over all K^T label paths

    :param emissions: (T, K) or (B, T, K)
    :param params: CRF parameters
    :return: scalar or (B,) log normalizers
    """
    e, _, squeeze = _batched(emissions)
    if e.shape[1] < 1:
        raise ValueError('forward_logZ needs at least one timestep')
    alpha = _forward_scores(e, params)
    log_z = torch.logsumexp(alpha[:, -1] + params.end, dim=1)
    return log_z[0] if squeeze else log_z


def crf_nll(emissions: torch.Tensor, labels: torch.Tensor, params: CrfParams, reduction: str = 'mean') \
        -> torch.Tensor:
    """Negative log-likelihood logZ - score(labels)

    :param emissions: (T, K) or (B, T, K)
    :param labels: (T,) or (B, T)
    :param params: CRF parameters
    :param reduction: 'mean' over sequences, 'sum', or 'none'
    :return: loss
    """
    nll = forward_logZ(emissions, params) - path_score(emissions, labels, params)
    if reduction == 'mean':
        return nll.mean()
    if reduction == 'sum':
        return nll.sum()
    if reduction == 'none':
        return nll
    raise ValueError(f'Unknown reduction "{reduction}"')


def viterbi_decode(emissions: torch.Tensor, params: CrfParams) -> torch.Tensor:
    """Highest-scoring label path; ties go to the lower class index

    :param emissions: (T, K) or (B, T, K)
    :param params: CRF parameters
    :return: (T,) or (B, T) class ids
    """
    e, _, squeeze = _batched(emissions)
    with torch.no_grad():
        score = params.start + e[:, 0]
        backpointers = []
        for t in range(1, e.shape[1]):
            score, best_prev = (score.unsqueeze(2) + params.transitions).max(dim=1)
            score = score + e[:, t]
            backpointers.append(best_prev)
        _, last = (score + params.end).max(dim=1)
        path = [last]
        for best_prev in reversed(backpointers):
            path.append(best_prev.gather(1, path[-1].unsqueeze(1)).squeeze(1))
        decoded = torch.stack(path[::-1], dim=1)
    return decoded[0] if squeeze else decoded


def marginals(emissions: torch.Tensor, params: CrfParams) -> torch.Tensor:
    """Per-timestep posterior class distributions by forward-backward

    :param emissions: (T, K) or (B, T, K)
    :param params: CRF parameters
    :return: (T, K) or (B, T, K); each row sums to 1
    """
    e, _, squeeze = _batched(emissions)
    alpha = _forward_scores(e, params)
    beta = _backward_scores(e, params)
    log_z = torch.logsumexp(alpha[:, -1] + params.end, dim=1)
    posterior = torch.exp(alpha + beta - log_z[:, None, None])
    return posterior[0] if squeeze else posterior
