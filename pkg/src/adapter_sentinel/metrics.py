"""Detection metrics: accuracy, rank-based AUC and ROC points."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class AUCUndefinedError(ValueError):
    """Raised when AUC is requested for a one-class set. ``da`` carries the accuracy if known."""

    def __init__(self, msg: str, da: float | None = None):
        super().__init__(msg)
        self.da = da


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-d and the same length")
    return scores[labels == 1], scores[labels == 0]


def auc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count one half.

    Computed from mid-ranks (Mann-Whitney U).
    """
    pos, neg = _split(scores, labels)
    if len(pos) == 0 or len(neg) == 0:
        raise AUCUndefinedError("AUC needs both classes present")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def auc_pairwise(scores, labels) -> float:
    """All-pairs reference count for :func:`auc`."""
    pos, neg = _split(scores, labels)
    if len(pos) == 0 or len(neg) == 0:
        raise AUCUndefinedError("AUC needs both classes present")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) for every distinct score, highest threshold first."""
    pos, neg = _split(scores, labels)
    if len(pos) == 0 or len(neg) == 0:
        raise AUCUndefinedError("ROC needs both classes present")
    pts = [(float("inf"), 0.0, 0.0)]
    for th in np.unique(np.concatenate([pos, neg]))[::-1]:
        pts.append((float(th), float((neg >= th).mean()), float((pos >= th).mean())))
    return pts


def detection_accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    return float((pred == labels).mean())
