from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from tinyloc.helper_functions import ConfigError, TrainingDivergedError, torch_generator
from tinyloc.metrics import accuracy, macro_f1
from tinyloc.models import EmissionModel
from tinyloc.nn_core import CheckedAdam
from tinyloc.rssi_data import DatasetSplit, LabeledSequence

LossFunction = Callable[[EmissionModel, torch.Tensor, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings"""
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f'epochs and batch_size must be at least 1, got {self.epochs}, {self.batch_size}')
        if not self.learning_rate > 0:
            raise ConfigError(f'learning_rate must be positive, got {self.learning_rate}')


@dataclass
class TrainResult:
    """Trained model (restored to its best validation epoch) and per-epoch history"""
    model: EmissionModel
    best_epoch: int
    best_val_f1: float
    history: List[Dict[str, float]] = field(default_factory=list)


def crf_loss(model: EmissionModel, x: torch.Tensor, y: torch.Tensor, _: Optional[torch.Tensor]) -> torch.Tensor:
    return model.loss(x, y)


def as_tensors(sequences: Sequence[LabeledSequence]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack equal-length sequences into (N, T, D) features and (N, T) labels"""
    lengths = {len(s) for s in sequences}
    if len(lengths) > 1:
        raise ValueError(f'Sequences of different lengths {sorted(lengths)} cannot be stacked')
    return (torch.from_numpy(np.stack([s.features for s in sequences])),
            torch.from_numpy(np.stack([s.labels for s in sequences])))


def predict(model: EmissionModel, sequences: Sequence[LabeledSequence], batch_size: int = 256) -> List[np.ndarray]:
    """Viterbi labels for each sequence, in order"""
    model.eval()
    by_length: Dict[int, List[int]] = {}
    for i, s in enumerate(sequences):
        by_length.setdefault(len(s), []).append(i)
    decoded: List[Optional[np.ndarray]] = [None] * len(sequences)
    with torch.no_grad():
        for indices in by_length.values():
            for start in range(0, len(indices), batch_size):
                chunk = indices[start:start + batch_size]
                features, _ = as_tensors([sequences[i] for i in chunk])
                for i, labels in zip(chunk, model.decode(features).numpy()):
                    decoded[i] = labels
    return decoded


def evaluate(model: EmissionModel, sequences: Sequence[LabeledSequence], class_count: int) -> Tuple[float, float]:
    """Timestep-level (macro F1, accuracy) of model on sequences"""
    preds = np.concatenate(predict(model, sequences))
    labels = np.concatenate([s.labels for s in sequences])
    return macro_f1(preds, labels, class_count), accuracy(preds, labels)


def train_model(model: EmissionModel, split: DatasetSplit, train_cfg: TrainConfig = TrainConfig(), seed: int = 0,
                loss_fn: LossFunction = crf_loss, extra: Optional[torch.Tensor] = None) -> TrainResult:
    """Mini-batch Adam training with best-validation checkpointing

    :param model: model to train in place
    :param split: dataset; train sequences must share one length
    :param train_cfg: optimizer and schedule
    :param seed: master seed for the batching stream
    :param loss_fn: loss over (model, features, labels, extra batch)
    :param extra: per-sequence tensor batched alongside the training data, e.g. teacher targets
    :return: the model restored to its best validation epoch, with history
    """
    if not split.train:
        raise ValueError('Training split is empty')
    x, y = as_tensors(split.train)
    if extra is not None and len(extra) != len(x):
        raise ValueError(f'{len(extra)} extra rows for {len(x)} training sequences')
    monitor = split.val or split.train
    optimizer = CheckedAdam(model.named_parameters(), lr=train_cfg.learning_rate,
                            betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps)
    generator = torch_generator(seed, 'batching')
    best_f1, best_epoch, best_state = -1.0, 0, copy.deepcopy(model.state_dict())
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(x), generator=generator)
        total = 0.0
        for batch, start in enumerate(range(0, len(x), train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model, x[idx], y[idx], None if extra is None else extra[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f'Loss became {loss.item()} at epoch {epoch}, batch {batch}')
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
        val_f1, _ = evaluate(model, monitor, split.class_count)
        history.append({'epoch': epoch, 'loss': total / len(x), 'val_f1': val_f1})
        logging.info(f'Epoch {epoch}: loss {total / len(x):.4f}, val macro-F1 {val_f1:.4f}')
        if val_f1 > best_f1:
            best_f1, best_epoch, best_state = val_f1, epoch, copy.deepcopy(model.state_dict())
            logging.info(f'New best checkpoint at epoch {epoch}')
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_epoch, best_f1, history)
