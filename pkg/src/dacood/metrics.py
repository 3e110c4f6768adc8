"""Threshold-free detection metrics. OoD samples are the positive class and
every score is oriented so that higher means more out-of-distribution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray  # descending; the first is +inf
    tpr: np.ndarray
    fpr: np.ndarray

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))

    def area(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))


@dataclass(frozen=True)
class DetectionEval:
    auroc: float
    fpr_at_95tpr: float
    n_pos: int
    n_neg: int
    detector: str = ""


def _as_scores(scores, what: str) -> np.ndarray:
    a = np.asarray(scores, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise MetricError(f"{what} scores are empty")
    if not np.isfinite(a).all():
        raise MetricError(f"{what} scores contain non-finite values")
    return a


def roc_curve(pos_scores, neg_scores) -> RocCurve:
    """Sweep a threshold down through every distinct score; a sample is flagged
    positive when its score is >= the threshold, so tied scores move together."""
    pos = _as_scores(pos_scores, "positive")
    neg = _as_scores(neg_scores, "negative")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    tp = pos.size - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    return RocCurve(
        np.concatenate([[np.inf], thresholds]),
        np.concatenate([[0.0], tp / pos.size]),
        np.concatenate([[0.0], fp / neg.size]),
    )


def auroc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUROC, ties counted as one half, via the rank sum."""
    pos = _as_scores(pos_scores, "positive")
    neg = _as_scores(neg_scores, "negative")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks for ties
    n_pos, n_neg = pos.size, neg.size
    # twice the U statistic is an integer, which keeps the result exact
    u2 = 2.0 * ranks[:n_pos].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def fpr_at_tpr(pos_scores, neg_scores, target_tpr: float = 0.95) -> float:
    """FPR at the largest threshold whose TPR reaches ``target_tpr``."""
    pos = _as_scores(pos_scores, "positive")
    neg = _as_scores(neg_scores, "negative")
    if not 0.0 < target_tpr <= 1.0:
        raise MetricError(f"target TPR must be in (0, 1], got {target_tpr}")
    candidates = np.unique(pos)[::-1]
    tpr = (pos.size - np.searchsorted(np.sort(pos), candidates, side="left")) / pos.size
    delta = candidates[np.argmax(tpr >= target_tpr)]
    return float(np.count_nonzero(neg >= delta) / neg.size)


def evaluate(pos_scores, neg_scores, detector: str = "") -> DetectionEval:
    pos = _as_scores(pos_scores, "positive")
    neg = _as_scores(neg_scores, "negative")
    return DetectionEval(auroc(pos, neg), fpr_at_tpr(pos, neg), pos.size, neg.size, detector)


def histogram(
    scores, n_bins: int, range: Optional[Sequence[float]] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-bin histogram returning (edges, counts). With an explicit range,
    values outside it are counted in the end bins."""
    if n_bins < 1:
        raise MetricError(f"n_bins must be at least 1, got {n_bins}")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if range is not None:
        lo, hi = float(range[0]), float(range[1])
        s = np.clip(s, lo, hi)
    elif s.size:
        lo, hi = float(s.min()), float(s.max())
    else:
        lo, hi = 0.0, 1.0
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(s, bins=n_bins, range=(lo, hi))
    return edges, counts


def overlap_coefficient(counts_a, counts_b) -> float:
    """Shared mass of two histograms on the same bins, each normalized to 1."""
    a = np.asarray(counts_a, dtype=np.float64)
    b = np.asarray(counts_b, dtype=np.float64)
    if a.shape != b.shape or a.sum() == 0 or b.sum() == 0:
        raise MetricError("overlap needs two non-empty histograms on the same bins")
    return float(np.minimum(a / a.sum(), b / b.sum()).sum())
