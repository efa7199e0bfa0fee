"""Reconstruction, KL and regression losses.

Reductions: BCE averages over every pixel, view and batch item; KLD sums over
latent dimensions and averages over the batch; MSE averages over the batch.
The loss weights are only meaningful relative to these conventions.
"""

from __future__ import annotations

import torch

EPS = 1e-7


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(target, pred, eps: float = EPS):
    _check_same(target, pred, "bce")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def kld(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, I)), summed over the last axis, batch-averaged."""
    _check_same(mu, sigma, "kld")
    if bool((sigma <= 0).any()):
        raise ValueError("kld needs strictly positive sigma")
    log_var = 2.0 * torch.log(sigma)
    per_item = -0.5 * (1.0 + log_var - mu.pow(2) - sigma.pow(2)).sum(dim=-1)
    return per_item.mean()


def mse(vol, vol_pred):
    _check_same(vol, vol_pred, "mse")
    return (vol - vol_pred).pow(2).mean()


def combine(bce_value, kld_value, w1, mse_value=0.0, w2=0.0):
    return bce_value + w1 * kld_value + w2 * mse_value


def vae_loss(A, B, mu, sigma, w1):
    return combine(bce(A, B), kld(mu, sigma), w1)


def rvae_loss(A, B, mu, sigma, vol, vol_pred, w1, w2):
    """``vol`` and ``vol_pred`` are in training units (mL divided by the volume scale)."""
    return combine(bce(A, B), kld(mu, sigma), w1, mse(vol, vol_pred), w2)
