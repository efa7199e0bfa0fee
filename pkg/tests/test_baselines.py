import numpy as np
import pytest

from slicevol.baselines import (
    MeasurementRegression,
    feature_map,
    fit_measurement_regression,
    predict_measurement_regression,
)
from slicevol.eval.metrics import mrva
from slicevol.phantom import CaseRecord, ManualMeasurements

from conftest import ellipsoid_cases


def record(i, L, W, Th, vol):
    return CaseRecord(f"c{i}", vol, vol > 314.5, ManualMeasurements(L, W, Th))


@pytest.fixture(scope="module")
def ellipsoids():
    return [rec for _, rec in ellipsoid_cases(40, seed=11)]


def test_feature_maps():
    m = ManualMeasurements(100.0, 60.0, 40.0)
    np.testing.assert_array_equal(feature_map(m, "single"), [100.0])
    np.testing.assert_array_equal(feature_map(m, "triple"), [100.0, 60.0, 40.0, 240000.0])
    with pytest.raises(ValueError):
        feature_map(m, "quad")


def test_single_mode_uses_length_only(ellipsoids):
    model = fit_measurement_regression(ellipsoids, "single")
    assert model.coefficients.shape == (1,) and model.feature_names == ("L",)


def test_triple_mode_on_ellipsoids(ellipsoids):
    train, test = ellipsoids[:30], ellipsoids[30:]
    model = fit_measurement_regression(train, "triple")
    pred = [predict_measurement_regression(model, r.measurements)[0] for r in test]
    assert mrva([r.volume_mL for r in test], pred)[0] >= 95.0


def test_exact_fit_reproduces_training_volumes():
    rng = np.random.default_rng(0)
    recs = []
    for i in range(12):
        L, W, Th = rng.uniform(50, 150), rng.uniform(30, 90), rng.uniform(20, 60)
        recs.append(record(i, L, W, Th, 5.0 + 0.2 * L + 0.1 * W + 0.3 * Th + 1e-3 * L * W * Th))
    model = fit_measurement_regression(recs, "triple")
    for r in recs:
        pred, clamped = predict_measurement_regression(model, r.measurements)
        assert pred == pytest.approx(r.volume_mL, rel=1e-6) and not clamped


def test_nested_residuals(ellipsoids):
    y = np.array([r.volume_mL for r in ellipsoids])
    residual = {}
    for mode in ("single", "triple"):
        model = fit_measurement_regression(ellipsoids, mode)
        pred = np.array([feature_map(r.measurements, mode) @ model.coefficients + model.intercept
                         for r in ellipsoids])
        residual[mode] = np.sum((pred - y) ** 2)
    assert residual["triple"] <= residual["single"] + 1e-6


def test_order_invariance(ellipsoids):
    a = fit_measurement_regression(ellipsoids, "triple")
    b = fit_measurement_regression(ellipsoids[::-1], "triple")
    m = ellipsoids[0].measurements
    assert predict_measurement_regression(a, m)[0] == pytest.approx(
        predict_measurement_regression(b, m)[0], rel=1e-9)


def test_zero_measurements_give_intercept():
    model = MeasurementRegression("single", np.array([3.0]), 12.0)
    assert predict_measurement_regression(model, ManualMeasurements(0, 0, 0)) == (12.0, False)
    neg = MeasurementRegression("single", np.array([3.0]), -50.0)
    assert predict_measurement_regression(neg, ManualMeasurements(10, 0, 0)) == (0.0, True)


def test_errors():
    same = [record(i, 100, 50, 30, 200.0 + i) for i in range(5)]
    with pytest.raises(ValueError, match="singular fit"):
        fit_measurement_regression(same, "single")
    with pytest.raises(ValueError, match="insufficient data"):
        fit_measurement_regression(same[:1], "single")
    with pytest.raises(ValueError):
        predict_measurement_regression(MeasurementRegression("single", np.ones(1), 0.0),
                                       ManualMeasurements(-1, 0, 0))
