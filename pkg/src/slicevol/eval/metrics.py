"""Volume-accuracy, correlation, classification and interval-coverage metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..phantom import SPLENOMEGALY_THRESHOLD_ML


def _pair(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ValueError(f"length mismatch: {truth.shape} vs {pred.shape}")
    return truth, pred


def rva(truth, pred) -> np.ndarray:
    """Per-case relative volume accuracy in percent (not clamped below 0)."""
    truth, pred = _pair(truth, pred)
    if len(truth) == 0:
        raise ValueError("need at least one case")
    if np.any(truth <= 0):
        raise ValueError("true volumes must be positive")
    return (1.0 - np.abs(pred - truth) / truth) * 100.0


def mrva(truth, pred) -> tuple[float, float]:
    """Mean RVA and its population standard deviation, both in percent."""
    per_case = rva(truth, pred)
    return float(per_case.mean()), float(per_case.std())


def pearson_r(truth, pred) -> float:
    truth, pred = _pair(truth, pred)
    if len(truth) < 2:
        raise ValueError("undefined correlation: need at least 2 cases")
    dt, dp = truth - truth.mean(), pred - pred.mean()
    denom = np.sqrt((dt ** 2).sum() * (dp ** 2).sum())
    if denom == 0:
        raise ValueError("undefined correlation: zero variance")
    return float((dt * dp).sum() / denom)


@dataclass(frozen=True)
class ClassificationResult:
    tp: int
    tn: int
    fp: int
    fn: int
    sen: Optional[float]
    spe: Optional[float]
    acc: float


def classify(truth, pred, threshold: float = SPLENOMEGALY_THRESHOLD_ML) -> ClassificationResult:
    truth, pred = _pair(truth, pred)
    if len(truth) == 0:
        raise ValueError("need at least one case")
    pos_t, pos_p = truth > threshold, pred > threshold
    tp = int(np.sum(pos_t & pos_p))
    tn = int(np.sum(~pos_t & ~pos_p))
    fp = int(np.sum(~pos_t & pos_p))
    fn = int(np.sum(pos_t & ~pos_p))
    sen = 100.0 * tp / (tp + fn) if tp + fn else None
    spe = 100.0 * tn / (tn + fp) if tn + fp else None
    return ClassificationResult(tp, tn, fp, fn, sen, spe, 100.0 * (tp + tn) / len(truth))


def splenomegaly_metrics(truth, pred, threshold: float = SPLENOMEGALY_THRESHOLD_ML):
    """``(SEN, SPE, ACC)`` in percent; a rate with an empty denominator is ``None``."""
    res = classify(truth, pred, threshold)
    return res.sen, res.spe, res.acc


def cia(truth, intervals: Sequence) -> float:
    """Percentage of cases whose true volume lies in the closed interval.

    ``intervals`` holds ``(lower, upper)`` pairs or objects with ``lower``/``upper``.
    """
    truth = np.asarray(truth, dtype=np.float64)
    bounds = np.array([(iv.lower, iv.upper) if hasattr(iv, "lower") else tuple(iv)
                       for iv in intervals], dtype=np.float64).reshape(-1, 2)
    if len(bounds) != len(truth):
        raise ValueError(f"length mismatch: {len(truth)} volumes, {len(bounds)} intervals")
    if len(truth) == 0:
        raise ValueError("need at least one case")
    lower, upper = bounds[:, 0], bounds[:, 1]
    if np.any(lower > upper):
        raise ValueError("malformed interval: lower > upper")
    inside = (lower <= truth) & (truth <= upper)
    return float(100.0 * inside.mean())
