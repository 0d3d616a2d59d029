from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from tinyloc.helper_functions import KB

BUDGET_64K = 64 * KB
BUDGET_32K = 32 * KB


def _checked(preds: Sequence[int], labels: Sequence[int]):
    preds, labels = np.asarray(preds, dtype=np.int64).ravel(), np.asarray(labels, dtype=np.int64).ravel()
    if len(preds) == 0:
        raise ValueError('Cannot score an empty prediction set')
    if len(preds) != len(labels):
        raise ValueError(f'{len(preds)} predictions for {len(labels)} labels')
    return preds, labels


def macro_f1(preds: Sequence[int], labels: Sequence[int], class_count: int) -> float:
    """Unweighted mean F1 over all class_count classes; a class absent from both sides scores 0

    :param preds: predicted class ids
    :param labels: true class ids
    :param class_count: number of classes K
    :return: macro F1 in [0, 1]
    """
    preds, labels = _checked(preds, labels)
    if max(preds.max(), labels.max()) >= class_count or min(preds.min(), labels.min()) < 0:
        raise ValueError(f'Class ids must lie in [0, {class_count})')
    return float(f1_score(labels, preds, labels=list(range(class_count)), average='macro', zero_division=0))


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of matching timesteps"""
    preds, labels = _checked(preds, labels)
    return float(accuracy_score(labels, preds))


def budget_check(n_bytes: int, limit_bytes: int) -> bool:
    """True iff n_bytes fits within limit_bytes"""
    if limit_bytes <= 0:
        raise ValueError(f'Budget limit must be positive, got {limit_bytes}')
    return n_bytes <= limit_bytes
