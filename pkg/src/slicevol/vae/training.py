"""Training loop, trained-model container and (de)serialization."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .. import io
from ..estimators import LinearHead, FCNHead, plr_fit
from ..preprocess import SlicePair
from . import losses
from .network import ModelConfig, VAENet, reparameterize

log = logging.getLogger(__name__)

METHOD_HEADS = {"vae": "none", "rvae_lr": "linear", "rvae_fcn": "fcn", "rvae_fcn_ci": "fcn"}
LOG_HEADER = ("epoch", "bce", "kld", "mse", "val_metric")
DEFAULT_EPOCHS = {"vae": 500, "rvae": 650}


@dataclass
class TrainConfig:
    w1: float = 0.2
    w2: float = 0.2
    lr: float = 1e-3
    batch_size: int = 8
    phase1_epochs: int = 150
    # None picks the per-method default (DEFAULT_EPOCHS)
    max_epochs: Optional[int] = None
    volume_scale: float = 10.0
    seed: int = 0
    plr_lambda: float = 1e-3
    checkpoint_every: int = 10
    grid_search: Optional[dict] = None

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.volume_scale <= 0:
            raise ValueError("volume_scale must be positive")
        if self.batch_size < 1 or self.phase1_epochs < 0 or (self.max_epochs or 0) < 0:
            raise ValueError("batch_size >= 1 and non-negative epoch counts required")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def epochs_for(self, method: str) -> int:
        if self.max_epochs is not None:
            return self.max_epochs
        return DEFAULT_EPOCHS["vae" if method == "vae" else "rvae"]


@dataclass
class Sample:
    """One training/evaluation case: clean ``[2, H, W]`` slices plus augmented variants."""

    case_id: str
    volume_mL: Optional[float]
    slices: np.ndarray
    augmented: Optional[np.ndarray] = None

    def views(self, n_views: int) -> np.ndarray:
        if self.slices.shape[0] < n_views:
            raise ValueError(f"config mismatch: {self.case_id} has {self.slices.shape[0]} views")
        return self.slices[:n_views]


@dataclass
class LatentDistribution:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must share dims")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be strictly positive")


@dataclass
class CacheEntry:
    case_id: str
    mu: np.ndarray
    volume_mL: float


class TrainingInterrupted(RuntimeError):
    pass


@dataclass
class TrainedModel:
    net: VAENet
    config: ModelConfig
    train_config: TrainConfig
    method: str
    training_mu_cache: list[CacheEntry] = field(default_factory=list)
    plr_head: Optional[LinearHead] = None
    selected_epoch: Optional[int] = None
    history: list[dict] = field(default_factory=list)

    @property
    def volume_scale(self) -> float:
        return self.train_config.volume_scale

    def _as_batch(self, slices) -> torch.Tensor:
        if isinstance(slices, SlicePair):
            arr = slices.stack()
        elif isinstance(slices, Sample):
            arr = slices.slices
        else:
            arr = np.asarray(slices)
        if arr.ndim == 2:
            arr = arr[None]
        size = self.config.image_size
        if arr.ndim != 3 or arr.shape[1:] != (size, size):
            raise ValueError(f"config mismatch: expected [views, {size}, {size}], got {arr.shape}")
        if arr.shape[0] < self.config.input_views:
            raise ValueError(f"config mismatch: model needs {self.config.input_views} views, "
                             f"input has {arr.shape[0]}")
        arr = arr[:self.config.input_views]
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]

    @torch.no_grad()
    def encode(self, slices) -> LatentDistribution:
        self.net.eval()
        mu, sigma = self.net.encode(self._as_batch(slices))
        return LatentDistribution(mu[0].double().numpy(), sigma[0].double().numpy())

    @torch.no_grad()
    def decode(self, z) -> np.ndarray:
        z = torch.as_tensor(np.asarray(z, dtype=np.float32))
        if z.shape[-1] != self.config.latent_dim:
            raise ValueError(f"dim mismatch: latent has {z.shape[-1]} dims, "
                             f"model expects {self.config.latent_dim}")
        self.net.eval()
        return self.net.decode(z.reshape(1, -1))[0].double().numpy()

    def head_params(self):
        """The regression head as plain arrays (``LinearHead`` or ``FCNHead``)."""
        head = self.net.head
        if head is None:
            return None
        if self.config.head == "linear":
            return LinearHead(head.weight.detach().double().numpy()[0],
                              float(head.bias.detach()[0]))
        hidden, out = head[0], head[2]
        return FCNHead(hidden.weight.detach().double().numpy().T,
                       hidden.bias.detach().double().numpy(),
                       out.weight.detach().double().numpy()[0],
                       float(out.bias.detach()[0]))

    def cache_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.training_mu_cache:
            raise ValueError("empty cache")
        mus = np.stack([c.mu for c in self.training_mu_cache])
        vols = np.array([c.volume_mL for c in self.training_mu_cache])
        return mus, vols

    def save(self, stem) -> None:
        stem = Path(stem)
        state = {k: v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        io.write_weights(stem.with_name(stem.name + ".weights"), state)
        meta = {
            "method": self.method,
            "model_config": self.config.to_dict(),
            "train_config": asdict(self.train_config),
            "selected_epoch": self.selected_epoch,
            "plr_head": None if self.plr_head is None else {
                "W": self.plr_head.W.tolist(), "b": self.plr_head.b},
            "training_mu_cache": [
                {"case_id": c.case_id, "volume_mL": c.volume_mL, "mu": c.mu.tolist()}
                for c in self.training_mu_cache],
        }
        stem.with_name(stem.name + ".model.json").write_text(json.dumps(meta) + "\n")

    @classmethod
    def load(cls, stem) -> "TrainedModel":
        stem = Path(stem)
        meta = json.loads(stem.with_name(stem.name + ".model.json").read_text())
        cfg = ModelConfig(**meta["model_config"])
        net = VAENet(cfg)
        arrays = io.read_weights(stem.with_name(stem.name + ".weights"))
        ref = net.state_dict()
        state = {k: torch.from_numpy(arrays[k]).to(ref[k].dtype) for k in ref}
        net.load_state_dict(state)
        net.eval()
        plr = meta.get("plr_head")
        return cls(
            net=net, config=cfg, train_config=TrainConfig(**meta["train_config"]),
            method=meta["method"],
            training_mu_cache=[CacheEntry(c["case_id"], np.array(c["mu"], dtype=np.float64),
                                          float(c["volume_mL"]))
                               for c in meta["training_mu_cache"]],
            plr_head=None if plr is None else LinearHead(np.array(plr["W"]), float(plr["b"])),
            selected_epoch=meta.get("selected_epoch"),
        )


def model_config_for(method: str, base: ModelConfig) -> ModelConfig:
    if method not in METHOD_HEADS:
        raise ValueError(f"unknown training method {method!r}")
    d = base.to_dict()
    d["head"] = METHOD_HEADS[method]
    d["head_input"] = "z" if method == "rvae_fcn_ci" else "mu"
    return ModelConfig(**d)


def _stack(samples: Sequence[Sample], n_views: int):
    clean = np.stack([s.views(n_views) for s in samples]).astype(np.float32)
    aug = None
    if all(s.augmented is not None and len(s.augmented) for s in samples):
        k = min(len(s.augmented) for s in samples)
        aug = np.stack([s.augmented[:k, :n_views] for s in samples]).astype(np.float32)
    return torch.from_numpy(clean), None if aug is None else torch.from_numpy(aug)


def _batches(perm: torch.Tensor, size: int) -> list[torch.Tensor]:
    chunks = list(torch.split(perm, size))
    # a lone trailing sample would leave batch-norm with a single value per channel
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = torch.cat([chunks[-2], chunks.pop()])
    return chunks


@torch.no_grad()
def _encode_one_by_one(net: VAENet, x: torch.Tensor) -> torch.Tensor:
    net.eval()
    return torch.cat([net.encode(x[i:i + 1])[0] for i in range(len(x))])


def _mrva(truth: np.ndarray, pred: np.ndarray) -> float:
    return float(np.mean((1.0 - np.abs(pred - truth) / truth) * 100.0))


@torch.no_grad()
def _validate(net: VAENet, method: str, x: torch.Tensor, vol_ml: Optional[np.ndarray],
              tc: TrainConfig) -> float:
    net.eval()
    mu, sigma = net.encode(x)
    if method == "vae":
        recon = net.decode(mu)
        return float(losses.vae_loss(x, recon, mu, sigma, tc.w1))
    pred = net.regress(mu).double().numpy() * tc.volume_scale
    return _mrva(vol_ml, np.maximum(pred, 0.0))


def _save_checkpoint(path: Path, state: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def train(train_set: Sequence[Sample], model_config: ModelConfig, train_config: TrainConfig,
          method: str = "vae", val_set: Optional[Sequence[Sample]] = None,
          checkpoint_path=None, log_path=None,
          interrupt_after: Optional[int] = None) -> TrainedModel:
    """Optimize a VAE (``method='vae'``) or a regression VAE (``rvae_*``).

    Regression methods run ``phase1_epochs`` with the volume term switched
    off, then the full objective until ``max_epochs``. The returned weights are
    the epoch with the best validation MRVA (regression methods, phase two
    only) or the lowest validation loss (plain VAE); without a validation set
    the last epoch is kept.

    ``checkpoint_path`` enables periodic snapshots of the complete training
    state; an existing snapshot is resumed from. ``interrupt_after`` raises
    :class:`TrainingInterrupted` after that many epochs (used to exercise
    resumption).
    """
    if not train_set:
        raise ValueError("empty dataset")
    cfg = model_config_for(method, model_config)
    tc = train_config
    regress = method != "vae"
    volumes = [s.volume_mL for s in train_set]
    if regress and any(v is None for v in volumes):
        raise ValueError(f"{method} needs ground-truth volumes for every training case")

    torch.manual_seed(tc.seed)
    net = VAENet(cfg)
    x_clean, x_aug = _stack(train_set, cfg.input_views)
    vol_ml = np.array([np.nan if v is None else v for v in volumes], dtype=np.float64)
    target = torch.from_numpy(vol_ml / tc.volume_scale).float()
    if regress:
        # start the regression at the mean training volume
        with torch.no_grad():
            net.head_output_layer().bias.fill_(float(target.mean()))
    opt = torch.optim.Adam(net.parameters(), lr=tc.lr, foreach=True)
    gen = torch.Generator().manual_seed(tc.seed + 7919)

    if val_set:
        val_x, _ = _stack(val_set, cfg.input_views)
        val_vol = np.array([s.volume_mL for s in val_set], dtype=np.float64)
        if regress and np.any(np.isnan(val_vol)):
            raise ValueError("validation cases need volumes")
    better = (lambda a, b: a > b) if regress else (lambda a, b: a < b)

    start, best, history = 0, None, []
    ckpt = Path(checkpoint_path) if checkpoint_path else None
    signature = json.dumps({"method": method, "model": cfg.to_dict(), "train": asdict(tc),
                            "cases": [s.case_id for s in train_set],
                            "val": [s.case_id for s in val_set or ()]}, sort_keys=True)
    if ckpt is not None and ckpt.exists():
        state = torch.load(ckpt, weights_only=False)
        if state.get("signature") == signature:
            net.load_state_dict(state["net"])
            opt.load_state_dict(state["opt"])
            gen.set_state(state["gen"])
            start, best, history = state["epoch"], state["best"], state["history"]
            log.info("resumed %s from epoch %d", method, start)
        else:
            log.warning("ignoring checkpoint %s from a different run configuration", ckpt)

    n = len(train_set)
    max_epochs = tc.epochs_for(method)
    for epoch in range(start, max_epochs):
        net.train()
        in_phase2 = regress and epoch >= tc.phase1_epochs
        w2 = tc.w2 if in_phase2 else 0.0
        perm = torch.randperm(n, generator=gen)
        choice = None if x_aug is None else torch.randint(x_aug.shape[1], (n,), generator=gen)
        sums = np.zeros(3)
        for idx in _batches(perm, tc.batch_size):
            xb = x_clean[idx] if choice is None else x_aug[idx, choice[idx]]
            mu, sigma = net.encode(xb)
            zeta = torch.randn(mu.shape, generator=gen)
            z = reparameterize(mu, sigma, zeta)
            recon = net.decode(z)
            b_loss = losses.bce(xb, recon)
            k_loss = losses.kld(mu, sigma)
            m_loss = torch.zeros(())
            if regress:
                pred = net.regress(z if cfg.head_input == "z" else mu)
                m_loss = losses.mse(target[idx], pred)
            loss = losses.combine(b_loss, k_loss, tc.w1, m_loss, w2)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += len(idx) * np.array([b_loss.item(), k_loss.item(), m_loss.item()])
        means = sums / n

        val_metric = None
        if val_set and (not regress or in_phase2):
            val_metric = _validate(net, method, val_x, val_vol, tc)
            if best is None or better(val_metric, best["metric"]):
                best = {"metric": val_metric, "epoch": epoch + 1,
                        "state": copy.deepcopy(net.state_dict())}
        history.append({"epoch": epoch + 1, "bce": means[0], "kld": means[1],
                        "mse": means[2], "val_metric": val_metric})

        done = epoch + 1
        if ckpt is not None and (done % max(tc.checkpoint_every, 1) == 0 or done == max_epochs):
            _save_checkpoint(ckpt, {"net": net.state_dict(), "opt": opt.state_dict(),
                                    "gen": gen.get_state(), "epoch": done, "best": best,
                                    "history": history, "signature": signature})
        if interrupt_after is not None and done >= interrupt_after and done < max_epochs:
            raise TrainingInterrupted(f"stopped after epoch {done}")

    selected = max_epochs
    if best is not None:
        net.load_state_dict(best["state"])
        selected = best["epoch"]

    if log_path is not None:
        io.write_csv(log_path, LOG_HEADER, [[h[k] for k in LOG_HEADER] for h in history])

    model = TrainedModel(net=net, config=cfg, train_config=tc, method=method,
                         selected_epoch=selected, history=history)
    mus = _encode_one_by_one(net, x_clean).double().numpy()
    model.training_mu_cache = [CacheEntry(s.case_id, mu, float(v))
                               for s, mu, v in zip(train_set, mus, vol_ml)]
    if np.all(np.isfinite(vol_ml)) and n >= 2:
        model.plr_head = plr_fit(mus, vol_ml, lam=tc.plr_lambda, volume_scale=tc.volume_scale)
    return model


def grid_search(train_set, val_set, model_config: ModelConfig, train_config: TrainConfig,
                method: str, w_values: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5)):
    """Pick (w1, w2) on the validation set; returns ``(best_w1, best_w2, scores)``.

    Plain VAE runs only search w1 and are ranked by validation loss; regression
    runs search both weights and are ranked by validation MRVA.
    """
    if not val_set:
        raise ValueError("grid search needs a validation set")
    regress = method != "vae"
    w2_values = w_values if regress else (train_config.w2,)
    scores = {}
    for w1 in w_values:
        for w2 in w2_values:
            tc = TrainConfig(**{**asdict(train_config), "w1": w1, "w2": w2})
            model = train(train_set, model_config, tc, method, val_set=val_set)
            x, _ = _stack(val_set, model.config.input_views)
            vols = np.array([s.volume_mL for s in val_set], dtype=np.float64)
            scores[(w1, w2)] = _validate(model.net, method, x, vols, tc)
    pick = max if regress else min
    w1, w2 = pick(scores, key=scores.get)
    return w1, w2, scores
