from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from tinyloc.container import model_checksum
from tinyloc.crf import CrfParams, crf_nll, marginals, viterbi_decode
from tinyloc.helper_functions import ConfigError, TinyLocError
from tinyloc.models import EmissionModel, ModelConfig, build_model, param_count
from tinyloc.quantize import QuantConfig, quantize_model
from tinyloc.rssi_data import DatasetSplit
from tinyloc.training import TrainConfig, TrainResult, as_tensors, evaluate, train_model

DEFAULT_ALPHA = 0.1
TARGET_MODES = ('hard_viterbi', 'soft_marginals')

TeacherTargets = torch.Tensor
"""(N, T, K) per-timestep target distributions; one-hot rows in hard mode"""


@dataclass(frozen=True)
class KDConfig:
    """Distillation settings; alpha weighs the CRF student loss against the teacher-matching loss"""
    alpha: float = DEFAULT_ALPHA
    mode: str = 'hard_viterbi'
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f'alpha must lie in [0, 1], got {self.alpha}')
        if self.mode not in TARGET_MODES:
            raise ConfigError(f'Unknown teacher-target mode "{self.mode}", expected one of {TARGET_MODES}')


def select_teacher(candidates: Sequence[EmissionModel], split: DatasetSplit,
                   scores: Optional[Sequence[float]] = None) -> EmissionModel:
    """Candidate with the highest validation macro-F1; ties go to the larger model

    :param candidates: trained models
    :param split: dataset whose validation split ranks the candidates
    :param scores: precomputed validation F1 per candidate, if already known
    :return: the chosen teacher
    """
    if not candidates:
        raise ValueError('select_teacher needs at least one candidate')
    if scores is None:
        monitor = split.val or split.train
        scores = [evaluate(model, monitor, split.class_count)[0] for model in candidates]
    ranked = sorted(range(len(candidates)), key=lambda i: (scores[i], param_count(candidates[i])), reverse=True)
    teacher = candidates[ranked[0]]
    logging.info(f'Selected teacher {teacher.config.name} with validation macro-F1 {scores[ranked[0]]:.4f}')
    return teacher


def teacher_targets(teacher: EmissionModel, features: torch.Tensor, mode: str = 'hard_viterbi') -> TeacherTargets:
    """Per-timestep targets from a frozen teacher: one-hot Viterbi labels, or CRF marginals in soft mode"""
    if mode not in TARGET_MODES:
        raise ValueError(f'Unknown teacher-target mode "{mode}"')
    teacher.eval()
    with torch.no_grad():
        emissions = teacher(features)
        if mode == 'soft_marginals':
            return marginals(emissions, teacher.crf).float()
        return F.one_hot(viterbi_decode(emissions, teacher.crf), teacher.config.class_count).float()


def distillation_loss(student_emissions: torch.Tensor, targets: TeacherTargets) -> torch.Tensor:
    """Cross-entropy of teacher targets against the student's per-timestep softmax, averaged over timesteps"""
    log_probs = torch.log_softmax(student_emissions, dim=-1)
    return -(targets.to(log_probs.dtype) * log_probs).sum(dim=-1).mean()


def mix_losses(student_loss: torch.Tensor, teacher_loss: torch.Tensor, alpha: float) -> torch.Tensor:
    """alpha * student_loss + (1 - alpha) * teacher_loss"""
    return alpha * student_loss + (1.0 - alpha) * teacher_loss


def kd_loss(student_emissions: torch.Tensor, gold_labels: torch.Tensor, targets: TeacherTargets, alpha: float,
            crf_params: CrfParams) -> torch.Tensor:
    """Combined distillation objective

    :param student_emissions: (B, T, K) or (T, K) student scores
    :param gold_labels: true labels matching the emissions
    :param targets: teacher targets matching the emissions
    :param alpha: weight of the CRF student loss
    :param crf_params: the student's CRF head
    :return: alpha * crf_nll + (1 - alpha) * distillation loss
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f'alpha must lie in [0, 1], got {alpha}')
    if targets.shape != student_emissions.shape:
        raise ValueError(f'Targets shape {tuple(targets.shape)} does not match emissions '
                         f'{tuple(student_emissions.shape)}')
    return mix_losses(crf_nll(student_emissions, gold_labels, crf_params),
                      distillation_loss(student_emissions, targets), alpha)


def teacher_id(teacher: EmissionModel) -> str:
    """Model name plus a short parameter checksum"""
    return f'{teacher.config.name}#{model_checksum(teacher)[:12]}'


def distill_train(teacher: EmissionModel, student_cfg: ModelConfig, split: DatasetSplit,
                  kd_cfg: KDConfig = KDConfig(), seed: int = 0) -> TrainResult:
    """Train a fresh student on the combined loss against precomputed teacher targets

    :param teacher: trained teacher; never modified
    :param student_cfg: student architecture, with the teacher's input and class dims
    :param split: dataset
    :param kd_cfg: alpha, target mode and training schedule
    :param seed: master seed for student init and batching
    :return: the best-validation student
    """
    if student_cfg.class_count != teacher.config.class_count:
        raise ConfigError(f'Student has {student_cfg.class_count} classes, teacher has '
                          f'{teacher.config.class_count}')
    if student_cfg.input_dim != teacher.config.input_dim:
        raise ConfigError(f'Student expects {student_cfg.input_dim} features, teacher expects '
                          f'{teacher.config.input_dim}')
    student = build_model(student_cfg, seed)
    if param_count(student) >= param_count(teacher):
        logging.warning(f'Student {student_cfg.name} ({param_count(student)} params) is not smaller than teacher '
                        f'{teacher.config.name} ({param_count(teacher)} params)')
    if kd_cfg.alpha == 1.0:
        logging.warning('alpha = 1 disables the distillation signal; this is plain supervised training')
    checksum = model_checksum(teacher)
    features, _ = as_tensors(split.train)
    targets = teacher_targets(teacher, features, kd_cfg.mode)

    def loss_fn(model: EmissionModel, x: torch.Tensor, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return kd_loss(model(x), y, t, kd_cfg.alpha, model.crf)

    result = train_model(student, split, kd_cfg.train, seed, loss_fn, extra=targets)
    if model_checksum(teacher) != checksum:
        raise TinyLocError('Teacher parameters changed during distillation')
    result.model.compression = {'variant': 'distill', 'teacher': teacher_id(teacher),
                                'alpha': kd_cfg.alpha, 'kd_mode': kd_cfg.mode}
    return result


def distill_then_quantize(teacher: EmissionModel, student_cfg: ModelConfig, split: DatasetSplit,
                          kd_cfg: KDConfig = KDConfig(), quant_cfg: QuantConfig = QuantConfig(), seed: int = 0) \
        -> Tuple[TrainResult, EmissionModel]:
    """Distill a student, then quantize it; returns the student result and its quantized sibling"""
    result = distill_train(teacher, student_cfg, split, kd_cfg, seed)
    features, _ = as_tensors(split.train)
    return result, quantize_model(result.model, quant_cfg, features)
