"""Volume estimation from the latent space: nearest neighbour, post-hoc linear
regression, the end-to-end regression heads and Monte-Carlo confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional, Union

import numpy as np

if TYPE_CHECKING:
    from .vae.training import TrainedModel


class Method(str, Enum):
    NN = "NN"
    PLR = "PLR"
    RVAE_LR = "RVAE_LR"
    RVAE_FCNR = "RVAE_FCNR"
    RVAE_FCNR_CI = "RVAE_FCNR_CI"


# which training objective/head each estimator needs
TRAINING_METHOD = {
    Method.NN: "vae",
    Method.PLR: "vae",
    Method.RVAE_LR: "rvae_lr",
    Method.RVAE_FCNR: "rvae_fcn",
    Method.RVAE_FCNR_CI: "rvae_fcn_ci",
}


@dataclass
class LinearHead:
    W: np.ndarray
    b: float


@dataclass
class FCNHead:
    """``out_w . relu(latent @ hidden_w + hidden_b) + out_b``; ``hidden_w`` is ``[latent, hidden]``."""

    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    out_b: float

    @property
    def latent_dim(self) -> int:
        return self.hidden_w.shape[0]


@dataclass
class VolumeEstimate:
    volume_mL: float
    method: Method
    clamped: bool = False


@dataclass
class ConfidenceInterval:
    eta: float
    theta: float
    lower: float
    upper: float
    n_samples: int

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "ConfidenceInterval":
        eta = float(np.mean(samples))
        theta = float(np.std(samples, ddof=1))
        return cls(eta, theta, eta - 1.96 * theta, eta + 1.96 * theta, len(samples))


def _clamp(value: float, method: Method) -> VolumeEstimate:
    if value < 0:
        return VolumeEstimate(0.0, method, clamped=True)
    return VolumeEstimate(float(value), method, clamped=False)


def nn_lookup(cache_mus: np.ndarray, cache_volumes: np.ndarray, mu: np.ndarray) -> float:
    """Volume of the cached embedding closest to ``mu`` (first index wins ties)."""
    if len(cache_mus) == 0:
        raise ValueError("empty cache")
    dist = np.sqrt(((cache_mus - mu[None, :]) ** 2).sum(axis=1))
    return float(cache_volumes[int(np.argmin(dist))])


def nn_estimate(model: "TrainedModel", training_mu_cache, query) -> VolumeEstimate:
    if not training_mu_cache:
        raise ValueError("empty cache")
    mus = np.stack([c.mu for c in training_mu_cache])
    vols = np.array([c.volume_mL for c in training_mu_cache])
    mu = model.encode(query).mu
    return VolumeEstimate(nn_lookup(mus, vols, mu), Method.NN)


def plr_fit(mus: np.ndarray, volumes_mL: np.ndarray, lam: float = 1e-3,
            volume_scale: float = 10.0) -> LinearHead:
    """Ridge regression from latent means to scaled volume; the intercept is not penalized."""
    mus = np.asarray(mus, dtype=np.float64)
    y = np.asarray(volumes_mL, dtype=np.float64) / volume_scale
    if len(mus) < 2:
        raise ValueError("plr_fit needs at least 2 training cases")
    if lam < 0:
        raise ValueError("ridge lambda must be non-negative")
    x_mean, y_mean = mus.mean(axis=0), y.mean()
    xc, yc = mus - x_mean, y - y_mean
    gram = xc.T @ xc + lam * np.eye(mus.shape[1])
    try:
        W = np.linalg.solve(gram, xc.T @ yc)
    except np.linalg.LinAlgError:
        W = np.linalg.lstsq(xc, yc, rcond=None)[0]
    return LinearHead(W, float(y_mean - x_mean @ W))


def head_forward(head: Union[LinearHead, FCNHead], latent: np.ndarray) -> np.ndarray:
    """Scaled-volume output for one latent vector or a ``[n, latent]`` batch."""
    latent = np.asarray(latent, dtype=np.float64)
    if isinstance(head, LinearHead):
        if latent.shape[-1] != len(head.W):
            raise ValueError(f"dim mismatch: head expects {len(head.W)}, got {latent.shape[-1]}")
        return latent @ head.W + head.b
    if latent.shape[-1] != head.latent_dim:
        raise ValueError(f"dim mismatch: head expects {head.latent_dim}, got {latent.shape[-1]}")
    hidden = np.maximum(latent @ head.hidden_w + head.hidden_b, 0.0)
    return hidden @ head.out_w + head.out_b


def plr_estimate(head: LinearHead, mu: np.ndarray, volume_scale: float = 10.0) -> VolumeEstimate:
    raw = float(head_forward(head, mu)) * volume_scale
    return _clamp(raw, Method.PLR)


def _require(model: "TrainedModel", method: Method) -> None:
    needed = TRAINING_METHOD[method]
    if method in (Method.NN, Method.PLR):
        if method is Method.PLR and model.plr_head is None:
            raise ValueError("method/model mismatch: model has no post-hoc regression")
        if method is Method.NN and not model.training_mu_cache:
            raise ValueError("method/model mismatch: model has no latent cache")
        return
    if model.method != needed:
        raise ValueError(f"method/model mismatch: {method.value} needs a {needed} model, "
                         f"got {model.method}")


def estimate_volume(model: "TrainedModel", slices, method) -> VolumeEstimate:
    method = Method(method)
    _require(model, method)
    if method is Method.NN:
        return nn_estimate(model, model.training_mu_cache, slices)
    mu = model.encode(slices).mu
    if method is Method.PLR:
        return plr_estimate(model.plr_head, mu, model.volume_scale)
    raw = float(head_forward(model.head_params(), mu)) * model.volume_scale
    return _clamp(raw, method)


def ci_from_latent(head: Union[LinearHead, FCNHead], mu: np.ndarray, sigma: np.ndarray,
                   n: int = 100, seed: int = 0, volume_scale: float = 10.0,
                   method: Method = Method.RVAE_FCNR_CI):
    """Monte-Carlo interval from ``n`` reparameterized latent samples.

    Each sample is clamped at 0 mL like a point estimate. The returned point
    estimate is the head output at the latent mean (zero noise).
    """
    if n < 2:
        raise ValueError("need n >= 2 samples for an interval")
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != sigma.shape:
        raise ValueError("dim mismatch between mu and sigma")
    zeta = np.random.default_rng(seed).standard_normal((n, mu.shape[-1]))
    z = mu[None, :] + zeta * sigma[None, :]
    samples = np.maximum(head_forward(head, z) * volume_scale, 0.0)
    point = _clamp(float(head_forward(head, mu)) * volume_scale, method)
    return point, ConfidenceInterval.from_samples(samples)


def ci_estimate(model: "TrainedModel", slices, n: int = 100, seed: int = 0):
    if model.method != "rvae_fcn_ci":
        raise ValueError("method/model mismatch: intervals need an rvae_fcn_ci model "
                         "(head trained on latent samples)")
    dist = model.encode(slices)
    return ci_from_latent(model.head_params(), dist.mu, dist.sigma, n=n, seed=seed,
                          volume_scale=model.volume_scale)
