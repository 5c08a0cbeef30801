"""Precision/recall metrics with tie-grouped thresholds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


class UndefinedMetricError(ContractError):
    """Raised when a metric needs at least one positive and there is none."""


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        y = np.asarray(self.labels).reshape(-1).astype(np.int64)
        if s.shape != y.shape:
            raise ContractError("scores and labels differ in length")
        if np.any((y != 0) & (y != 1)):
            raise ContractError("labels must be 0 or 1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y)

    @property
    def P(self) -> int:
        return int(self.labels.sum())

    @property
    def N(self) -> int:
        return int(len(self.labels) - self.labels.sum())


def _as_set(scores, labels=None) -> ScoredSet:
    if isinstance(scores, ScoredSet):
        return scores
    return ScoredSet(scores, labels)


def _threshold_counts(ss: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct thresholds (descending) with cumulative TP and FP at each."""
    order = np.argsort(-ss.scores, kind="stable")
    s = ss.scores[order]
    y = ss.labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # keep the last index of each run of equal scores
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    return s[last], tp[last], fp[last]


def pr_curve(scores, labels=None) -> list[tuple[float, float]]:
    """(recall, precision) per distinct threshold, by increasing recall.

    A leading recall-0 point carries the first threshold's precision.
    """
    ss = _as_set(scores, labels)
    if ss.P == 0:
        raise UndefinedMetricError("precision/recall undefined without positives")
    _, tp, fp = _threshold_counts(ss)
    recall = tp / ss.P
    precision = tp / (tp + fp)
    points = [(0.0, float(precision[0]))]
    points += [(float(r), float(p)) for r, p in zip(recall, precision)]
    return points


def pr_auc(scores, labels=None) -> float:
    """Average precision: sum of (R_i - R_{i-1}) * P_i over thresholds."""
    points = pr_curve(scores, labels)
    r = np.array([p[0] for p in points])
    p = np.array([p[1] for p in points])
    return float(np.sum(np.diff(r) * p[1:]))


def fpr_at_recall(scores, labels=None, target_recall: float = 0.9) -> float:
    """False-positive rate at the first (highest) threshold reaching the target recall."""
    ss = _as_set(scores, labels)
    if ss.P == 0:
        raise UndefinedMetricError("recall undefined without positives")
    if not 0.0 < target_recall <= 1.0:
        raise ContractError("target_recall must be in (0, 1]")
    if ss.N == 0:
        return 0.0
    _, tp, fp = _threshold_counts(ss)
    # small slack so e.g. 9/10 counts as reaching 0.9
    reached = np.flatnonzero(tp >= target_recall * ss.P - 1e-9)
    return float(fp[reached[0]] / ss.N)


def precision_recall_f1(scores, labels=None, threshold: float = 0.5) -> tuple[float, float, float]:
    """Point metrics at a fixed threshold (score >= threshold is malicious)."""
    ss = _as_set(scores, labels)
    pred = ss.scores >= threshold
    tp = int(np.sum(pred & (ss.labels == 1)))
    fp = int(np.sum(pred & (ss.labels == 0)))
    fn = int(np.sum(~pred & (ss.labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1
