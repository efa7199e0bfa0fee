"""Clinical comparator: least-squares volume regression on manual measurements.

``single`` mode regresses on the organ length alone; ``triple`` mode uses
length, width, thickness and their product, the last of which carries the
volume of any ellipsoid-like body up to a constant factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .phantom import CaseRecord, ManualMeasurements

MODES = ("single", "triple")
FEATURE_NAMES = {"single": ("L",), "triple": ("L", "W", "Th", "L*W*Th")}


def feature_map(measurements: ManualMeasurements, mode: str) -> np.ndarray:
    L, W, Th = measurements.as_features()
    if mode == "single":
        return np.array([L])
    if mode == "triple":
        return np.array([L, W, Th, L * W * Th])
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@dataclass
class MeasurementRegression:
    mode: str
    coefficients: np.ndarray
    intercept: float

    @property
    def feature_names(self) -> tuple[str, ...]:
        return FEATURE_NAMES[self.mode]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "features": list(self.feature_names),
                "coefficients": [float(c) for c in self.coefficients],
                "intercept": float(self.intercept)}


def fit_measurement_regression(records: Sequence[CaseRecord], mode: str) -> MeasurementRegression:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    usable = [r for r in records if r.measurements is not None and r.volume_mL is not None]
    if len(usable) < 2:
        raise ValueError("insufficient data: need at least 2 cases with measurements and volumes")
    X = np.stack([feature_map(r.measurements, mode) for r in usable])
    y = np.array([r.volume_mL for r in usable], dtype=np.float64)
    design = np.column_stack([np.ones(len(X)), X])
    # column scaling keeps the rank test meaningful when the product term dwarfs the others
    scale = np.abs(design).max(axis=0)
    scale[scale == 0] = 1.0
    scaled = design / scale
    if np.linalg.matrix_rank(scaled) < design.shape[1]:
        raise ValueError("singular fit: measurement design matrix is rank deficient")
    beta = np.linalg.lstsq(scaled, y, rcond=None)[0] / scale
    return MeasurementRegression(mode, beta[1:], float(beta[0]))


def predict_raw(model: MeasurementRegression, measurements: ManualMeasurements) -> float:
    if model is None or model.coefficients is None:
        raise ValueError("unfitted model")
    feats = feature_map(measurements, model.mode)
    return float(feats @ model.coefficients + model.intercept)


def predict_measurement_regression(model: MeasurementRegression,
                                   measurements: ManualMeasurements) -> tuple[float, bool]:
    """Predicted volume in mL and whether it was clamped up to 0."""
    if any(v < 0 for v in measurements.as_features()):
        raise ValueError("measurements must be non-negative")
    raw = predict_raw(model, measurements)
    if raw < 0:
        return 0.0, True
    return raw, False
