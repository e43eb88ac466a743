"""MAE, ROC-AUC and average precision."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class DegenerateLabelsError(ValueError):
    def __init__(self, msg: str = "degenerate labels: both classes are required"):
        super().__init__(msg)


def mae(pred, target, mask=None) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    err = np.abs(pred - target)
    if mask is None:
        return float(err.mean())
    mask = np.asarray(mask, dtype=bool)
    return float(err[mask].mean())


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    pos = labels > 0.5
    if pos.all() or not pos.any():
        raise DegenerateLabelsError()
    return scores, pos


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2.

    Uses the Mann-Whitney rank-sum with average ranks for tied scores. Twice
    the rank sum is an integer, so the statistic is formed exactly and only
    the final division rounds.
    """
    scores, pos = _binary(scores, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    ranks = rankdata(scores, method="average")
    twice_u = int(round(2.0 * ranks[pos].sum())) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Area under the precision-recall step curve.

    Tied scores form a single threshold, so every positive in a tie group
    gets the precision of the whole group.
    """
    scores, pos = _binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(pos[order])
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1)
    d_recall = np.diff(np.r_[0.0, tp_at]) / tp[-1]
    return float(np.sum(d_recall * precision))


def multitask(metric, scores, labels, mask=None) -> float:
    """Average ``metric`` over output columns that contain both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.ndim == 1:
        scores = scores[:, None]
        labels = labels[:, None]
        mask = None if mask is None else np.asarray(mask)[:, None]
    values = []
    for k in range(scores.shape[1]):
        keep = slice(None) if mask is None else np.asarray(mask)[:, k] > 0
        try:
            values.append(metric(scores[keep, k], labels[keep, k]))
        except DegenerateLabelsError:
            continue
    if not values:
        raise DegenerateLabelsError()
    return float(np.mean(values))
