"""Bag-level classification metrics: AUROC, average precision, operating point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mesograph.errors import DataError


@dataclass
class EvalRecord:
    bag_id: str
    score: float      # combined Z
    positive: bool    # subtype in {B, S}


def _scores_labels(records):
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([bool(r.positive) for r in records])
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    return scores, labels


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(records) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), via the rank-sum identity."""
    scores, labels = _scores_labels(records)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"auroc undefined with {n_pos} positives and {n_neg} negatives"
        )
    ranks = _midranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(records) -> float:
    """Step-integrated precision-recall area, descending scores with all
    records at a tied score entering together."""
    scores, labels = _scores_labels(records)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DataError("average precision undefined without positives")
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[j + 1] == scores[i]:
            j += 1
        tp += int(labels[i : j + 1].sum())
        fp += (j - i + 1) - int(labels[i : j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def sens_spec_at(records, threshold: float):
    """(sensitivity, specificity) for the rule: score >= threshold -> positive."""
    scores, labels = _scores_labels(records)
    pred = scores >= threshold
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("sensitivity/specificity need both classes")
    sens = float((pred & labels).sum() / n_pos)
    spec = float((~pred & ~labels).sum() / n_neg)
    return sens, spec


def operating_point(records):
    """(threshold, sensitivity, specificity) maximizing Youden's J.

    Candidate thresholds are the observed scores plus +inf (predict
    nothing positive); ties on J break toward higher specificity, then
    toward the higher threshold, so the choice is deterministic.
    """
    scores, labels = _scores_labels(records)
    if labels.all() or not labels.any():
        raise DataError("operating point needs both classes")
    candidates = np.concatenate([np.unique(scores), [np.inf]])
    best = None
    for t in candidates:
        sens, spec = sens_spec_at(records, t)
        key = (sens + spec - 1.0, spec, t)
        if best is None or key > best[0]:
            best = (key, float(t), sens, spec)
    return best[1], best[2], best[3]
