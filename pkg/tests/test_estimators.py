import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from slicevol.estimators import (
    ConfidenceInterval,
    FCNHead,
    LinearHead,
    Method,
    ci_estimate,
    ci_from_latent,
    estimate_volume,
    head_forward,
    nn_estimate,
    nn_lookup,
    plr_estimate,
    plr_fit,
)
from slicevol.vae.training import TrainConfig, train

from conftest import tiny_model_config


def scan_oracle(mus, vols, q):
    best, best_d = None, math.inf
    for i in range(len(mus)):
        d = math.sqrt(sum((a - b) ** 2 for a, b in zip(mus[i], q)))
        if d < best_d:
            best, best_d = i, d
    return vols[best]


def fcn_oracle(head, z):
    out = head.out_b
    for j in range(len(head.hidden_b)):
        pre = head.hidden_b[j] + sum(z[i] * head.hidden_w[i, j] for i in range(len(z)))
        out += head.out_w[j] * max(pre, 0.0)
    return out


class TestNearestNeighbour:
    def test_matches_linear_scan(self):
        rng = np.random.default_rng(0)
        mus = rng.normal(size=(50, 8))
        vols = rng.uniform(50, 1500, size=50)
        for q in rng.normal(size=(100, 8)):
            assert nn_lookup(mus, vols, q) == scan_oracle(mus, vols, q)

    def test_tie_goes_to_lower_index(self):
        mus = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert nn_lookup(mus, np.array([100.0, 200.0]), np.zeros(2)) == 100.0

    def test_empty_cache(self):
        with pytest.raises(ValueError, match="empty cache"):
            nn_lookup(np.zeros((0, 3)), np.zeros(0), np.zeros(3))

    def test_returns_a_training_volume(self):
        rng = np.random.default_rng(1)
        mus, vols = rng.normal(size=(20, 4)), rng.uniform(1, 10, 20)
        for q in rng.normal(size=(30, 4)) * 5:
            assert nn_lookup(mus, vols, q) in vols


class TestPostHocRegression:
    def test_exact_linear_system(self):
        rng = np.random.default_rng(0)
        mus = rng.normal(size=(60, 10))
        w, b = rng.normal(size=10), 30.0
        vols = 10 * (mus @ w + b)
        head = plr_fit(mus, vols, lam=0.0)
        pred = np.array([plr_estimate(head, m).volume_mL for m in mus])
        np.testing.assert_allclose(pred, vols, rtol=1e-6)
        head_small = plr_fit(mus, vols, lam=1e-9)
        np.testing.assert_allclose(mus @ head_small.W + head_small.b, vols / 10, rtol=1e-6)

    def test_underdetermined_is_finite(self):
        rng = np.random.default_rng(1)
        head = plr_fit(rng.normal(size=(5, 128)), rng.uniform(100, 900, 5))
        assert np.all(np.isfinite(head.W)) and np.isfinite(head.b)

    def test_constant_volumes(self):
        rng = np.random.default_rng(2)
        head = plr_fit(rng.normal(size=(30, 6)), np.full(30, 250.0))
        np.testing.assert_allclose(head.W, 0.0, atol=1e-9)
        assert head.b == pytest.approx(25.0)

    def test_needs_two_cases(self):
        with pytest.raises(ValueError):
            plr_fit(np.zeros((1, 3)), np.ones(1))

    def test_estimate_arithmetic(self):
        est = plr_estimate(LinearHead(np.zeros(4), 5.0), np.ones(4))
        assert est.volume_mL == 50.0 and not est.clamped and est.method is Method.PLR
        neg = plr_estimate(LinearHead(np.zeros(4), -0.3), np.ones(4))
        assert neg.volume_mL == 0.0 and neg.clamped

    def test_estimate_matches_dot_product(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            W, mu, b = rng.normal(size=5), rng.normal(size=5), rng.uniform(20, 40)
            raw = 10 * (sum(W[i] * mu[i] for i in range(5)) + b)
            est = plr_estimate(LinearHead(W, b), mu)
            assert est.volume_mL == pytest.approx(max(raw, 0.0), rel=1e-12, abs=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            plr_estimate(LinearHead(np.zeros(4), 1.0), np.zeros(3))


class TestHeads:
    def test_fcn_dead_hidden_layer_outputs_bias(self):
        head = FCNHead(np.ones((3, 4)), np.full(4, -100.0), np.ones(4), 7.5)
        assert head_forward(head, np.ones(3)) == 7.5

    def test_linear_head_matches_plr_raw(self):
        head = LinearHead(np.array([1.0, -2.0]), 3.0)
        mu = np.array([0.5, 0.25])
        assert head_forward(head, mu) * 10 == plr_estimate(head, mu).volume_mL

    def test_fcn_matches_matrix_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            head = FCNHead(rng.normal(size=(6, 5)) * 0.3, rng.normal(size=5) * 0.1,
                           rng.normal(size=5), float(rng.normal()))
            z = rng.normal(size=6)
            assert head_forward(head, z) == pytest.approx(fcn_oracle(head, z), abs=1e-9)

    def test_batched_forward(self):
        rng = np.random.default_rng(1)
        head = FCNHead(rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4), 0.5)
        zs = rng.normal(size=(7, 3))
        np.testing.assert_allclose(head_forward(head, zs), [head_forward(head, z) for z in zs])

    def test_dim_mismatch(self):
        head = FCNHead(np.zeros((3, 4)), np.zeros(4), np.zeros(4), 0.0)
        with pytest.raises(ValueError, match="dim mismatch"):
            head_forward(head, np.zeros(5))


class TestConfidenceInterval:
    def test_interval_identities(self):
        ci = ConfidenceInterval.from_samples(np.array([1.0, 2.0, 4.0, 7.0]))
        assert ci.lower == ci.eta - 1.96 * ci.theta and ci.upper == ci.eta + 1.96 * ci.theta
        assert ci.theta == pytest.approx(np.std([1, 2, 4, 7], ddof=1))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 3.0))
    def test_bounds_ordering(self, seed, spread):
        rng = np.random.default_rng(seed)
        head = LinearHead(rng.normal(size=4), 40.0)
        _, ci = ci_from_latent(head, rng.normal(size=4), np.full(4, spread), seed=seed)
        assert ci.lower <= ci.eta <= ci.upper
        assert ci.upper - ci.lower == pytest.approx(2 * 1.96 * ci.theta, rel=1e-12)

    def test_vanishing_sigma(self):
        head = LinearHead(np.array([1.0, 2.0, 3.0]), 20.0)
        mu = np.array([0.1, 0.2, 0.3])
        point, ci = ci_from_latent(head, mu, np.full(3, 1e-12))
        assert ci.theta < 1e-6
        assert ci.eta == pytest.approx(point.volume_mL, rel=1e-9)
        assert ci.n_samples == 100

    def test_deterministic_given_seed(self):
        head = LinearHead(np.ones(3), 30.0)
        a = ci_from_latent(head, np.zeros(3), np.ones(3), seed=4)[1]
        b = ci_from_latent(head, np.zeros(3), np.ones(3), seed=4)[1]
        assert a == b

    def test_linear_head_spread_matches_propagation(self):
        W, sigma = np.array([0.5, -1.0, 2.0, 0.25]), np.array([0.3, 0.2, 0.4, 1.0])
        analytic = np.linalg.norm(W * sigma) * 10
        for seed in range(50):
            _, ci = ci_from_latent(LinearHead(W, 100.0), np.zeros(4), sigma, seed=seed)
            assert abs(ci.theta - analytic) <= 0.2 * analytic

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            ci_from_latent(LinearHead(np.ones(2), 1.0), np.zeros(2), np.ones(2), n=1)


@pytest.fixture(scope="module")
def lr_model(tiny_samples):
    model = train(tiny_samples[:4], tiny_model_config(), TrainConfig(max_epochs=0), "rvae_lr")
    return model


def _set_linear_head(model, weight, bias):
    with torch.no_grad():
        model.net.head.weight.fill_(weight)
        model.net.head.bias.fill_(bias)


class TestDispatch:
    def test_rescales_by_volume_scale(self, lr_model, tiny_samples):
        _set_linear_head(lr_model, 0.0, 35.2)
        est = estimate_volume(lr_model, tiny_samples[0].slices, "RVAE_LR")
        assert est.volume_mL == pytest.approx(352.0, rel=1e-6) and not est.clamped

    def test_negative_output_is_clamped(self, lr_model, tiny_samples):
        _set_linear_head(lr_model, 0.0, -4.0)
        est = estimate_volume(lr_model, tiny_samples[0].slices, Method.RVAE_LR)
        assert est.volume_mL == 0.0 and est.clamped

    def test_nn_dispatch_is_identical(self, lr_model, tiny_samples):
        q = tiny_samples[6].slices
        a = estimate_volume(lr_model, q, "NN")
        b = nn_estimate(lr_model, lr_model.training_mu_cache, q)
        assert a == b

    def test_method_model_mismatch(self, lr_model, tiny_samples):
        with pytest.raises(ValueError, match="method/model mismatch"):
            estimate_volume(lr_model, tiny_samples[0].slices, "RVAE_FCNR")
        with pytest.raises(ValueError, match="method/model mismatch"):
            ci_estimate(lr_model, tiny_samples[0].slices)

    def test_ci_point_estimate_uses_mean_latent(self, tiny_samples):
        model = train(tiny_samples[:4], tiny_model_config(), TrainConfig(max_epochs=0),
                      "rvae_fcn_ci")
        point, ci = ci_estimate(model, tiny_samples[0].slices, seed=1)
        dist = model.encode(tiny_samples[0].slices)
        expected = head_forward(model.head_params(), dist.mu) * 10
        assert point.volume_mL == pytest.approx(max(expected, 0.0), rel=1e-5)
        assert ci.n_samples == 100
