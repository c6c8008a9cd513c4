"""ROC statistics and classification summaries."""

from __future__ import annotations

import logging

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import rankdata

from .errors import MetricError, ParameterError

logger = logging.getLogger(__name__)


def _scored(scores, positive):
    s = np.asarray(scores, dtype=float).ravel()
    pos = np.asarray(positive, dtype=bool).ravel()
    if s.size == 0:
        raise MetricError("empty scored set")
    if s.shape != pos.shape:
        raise ParameterError("scores and flags must have equal length")
    if not np.all(np.isfinite(s)):
        raise MetricError("non-finite score")
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == s.size:
        raise MetricError("ROC needs both positive and negative examples")
    return s, pos


def roc_auc(scores, positive) -> float:
    """Mann-Whitney statistic; tied pairs count 1/2."""
    s, pos = _scored(scores, positive)
    n1 = int(pos.sum())
    n0 = s.size - n1
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def brute_force_auc(scores, positive) -> float:
    """O(n^2) pair enumeration. Test oracle only."""
    s, pos = _scored(scores, positive)
    if s.size > 2000:
        raise ParameterError("brute_force_auc is limited to 2,000 scores")
    p, n = s[pos], s[~pos]
    wins = 0.0
    for a in p:
        for b in n:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(p) * len(n))


def roc_curve(scores, positive):
    """ROC vertices from (0, 0) to (1, 1), one per distinct threshold."""
    s, pos = _scored(scores, positive)
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(pos)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / pos.sum()]
    fpr = np.r_[0.0, fps / (~pos).sum()]
    return fpr, tpr


def tpr_at_fpr(scores, positive, fpr_cap: float = 0.01) -> float:
    """TPR at ``fpr_cap``, interpolated linearly between ROC vertices.

    Where the curve jumps vertically at exactly ``fpr_cap``, the upper
    point is used.
    """
    if not 0 <= fpr_cap <= 1:
        raise ParameterError(f"fpr_cap={fpr_cap} outside [0, 1]")
    fpr, tpr = roc_curve(scores, positive)
    i = int(np.searchsorted(fpr, fpr_cap, side="right")) - 1
    if fpr[i] == fpr_cap or i == fpr.size - 1:
        return float(tpr[i])
    frac = (fpr_cap - fpr[i]) / (fpr[i + 1] - fpr[i])
    return float(tpr[i] + frac * (tpr[i + 1] - tpr[i]))


def partial_auc(scores, positive, fpr_cap: float = 0.01) -> float:
    """McClish-standardized partial AUC over FPR in [0, fpr_cap] (0.5 = chance)."""
    if not 0 < fpr_cap <= 1:
        raise ParameterError(f"fpr_cap={fpr_cap} outside (0, 1]")
    fpr, tpr = roc_curve(scores, positive)
    stop = int(np.searchsorted(fpr, fpr_cap, side="right"))
    xs = np.r_[fpr[:stop], fpr_cap]
    ys = np.r_[tpr[:stop], tpr_at_fpr(scores, positive, fpr_cap)]
    area = float(trapezoid(ys, xs))
    lo, hi = fpr_cap * fpr_cap / 2.0, fpr_cap
    return 0.5 * (1.0 + (area - lo) / (hi - lo))


def multiclass_auc(labels, proba, classes) -> float:
    """Macro average of one-vs-rest AUCs, class ``c`` scored by ``proba[:, c]``.

    Classes absent from ``labels`` are skipped with a warning.
    """
    labels = np.asarray(list(labels))
    proba = np.atleast_2d(np.asarray(proba, dtype=float))
    aucs = []
    for c, name in enumerate(classes):
        pos = labels == name
        if not pos.any() or pos.all():
            logger.warning("class %s absent (or alone) in evaluation set; skipped in multi-class AUC", name)
            continue
        aucs.append(roc_auc(proba[:, c], pos))
    if len(aucs) < 2:
        raise MetricError("multi-class AUC needs at least two classes present")
    return float(np.mean(aucs))


def accuracy_and_macro_f1(labels, predicted, classes=None):
    labels, predicted = list(labels), list(predicted)
    if len(labels) != len(predicted):
        raise ParameterError("labels and predictions differ in length")
    if not labels:
        raise ParameterError("empty label list")
    if classes is None:
        classes = sorted(set(labels) | set(predicted))
    acc = sum(a == b for a, b in zip(labels, predicted)) / len(labels)
    f1s = []
    for c in classes:
        tp = sum(a == c and b == c for a, b in zip(labels, predicted))
        fp = sum(a != c and b == c for a, b in zip(labels, predicted))
        fn = sum(a == c and b != c for a, b in zip(labels, predicted))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return acc, float(np.mean(f1s))
