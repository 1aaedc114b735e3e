"""Evaluation metrics: AUC via rank statistics and logloss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import bce_loss
from .numerics import Tensor


class MetricError(ValueError):
    pass


@dataclass
class EvalResult:
    auc: float
    logloss: float
    n_instances: int


def auc(scores, labels):
    """Probability a random positive outranks a random negative, ties 0.5.

    Computed from average ranks in O(N log N); exactly equals the O(N^2)
    all-pairs count.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both a positive and a negative label")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    # average ranks over tied groups
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels):
    """Binary cross-entropy; same clipped formula as the training loss."""
    return float(bce_loss(Tensor(np.asarray(scores, dtype=np.float64)), labels).value)


def evaluate_scores(scores, labels):
    return EvalResult(auc=auc(scores, labels), logloss=logloss(scores, labels), n_instances=len(labels))
