"""Residual-block VAE with optional volume-regression head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

HEADS = ("none", "linear", "fcn")

# keeps exp(0.5 * logvar) finite in float32
LOGVAR_RANGE = (-30.0, 20.0)


@dataclass
class ModelConfig:
    latent_dim: int = 128
    input_views: int = 1
    image_size: int = 224
    encoder_blocks: int = 8
    decoder_blocks: int = 8
    channel_widths: tuple[int, ...] = (32, 64, 128, 256)
    head: str = "none"
    fcn_hidden: int = 64
    # "z" trains the head on reparameterized samples (confidence-interval variant)
    head_input: str = "mu"

    def __post_init__(self):
        self.channel_widths = tuple(int(c) for c in self.channel_widths)
        self.validate()

    @property
    def downsampling(self) -> int:
        # the input layer halves once, then every stage after the first
        return 2 ** len(self.channel_widths)

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // self.downsampling

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.input_views not in (1, 2):
            raise ValueError("input_views must be 1 or 2")
        if not self.channel_widths or min(self.channel_widths) < 1:
            raise ValueError("channel_widths must be non-empty positive ints")
        n_stages = len(self.channel_widths)
        for name in ("encoder_blocks", "decoder_blocks"):
            blocks = getattr(self, name)
            if blocks < n_stages:
                raise ValueError(f"{name} must be >= number of stages ({n_stages})")
        if self.image_size % self.downsampling or self.image_size < self.downsampling:
            raise ValueError(f"image_size {self.image_size} is not a multiple of the "
                             f"downsampling factor {self.downsampling}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.fcn_hidden < 1:
            raise ValueError("fcn_hidden must be >= 1")
        if self.head_input not in ("mu", "z"):
            raise ValueError("head_input must be 'mu' or 'z'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        return d


def _stage_of(block: int, n_blocks: int, n_stages: int) -> int:
    return block * n_stages // n_blocks


class ResidualBlock(nn.Module):
    """Two conv-BN-ReLU cascades around an identity or 1x1 projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, upsample: bool = False):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                                          nn.BatchNorm2d(out_ch))

    def forward(self, x):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(h + skip)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.channel_widths
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.input_views, widths[0], 3, 2, 1, bias=False),
            nn.BatchNorm2d(widths[0]), nn.ReLU())
        blocks = []
        in_ch = widths[0]
        prev_stage = 0
        for b in range(cfg.encoder_blocks):
            stage = _stage_of(b, cfg.encoder_blocks, len(widths))
            stride = 2 if stage != prev_stage else 1
            blocks.append(ResidualBlock(in_ch, widths[stage], stride=stride))
            in_ch, prev_stage = widths[stage], stage
        self.blocks = nn.Sequential(*blocks)
        flat = widths[-1] * cfg.bottleneck_size ** 2
        self.to_stats = nn.Linear(flat, 2 * cfg.latent_dim)
        self.latent_dim = cfg.latent_dim

    def forward(self, x):
        h = self.blocks(self.stem(x)).flatten(1)
        stats = self.to_stats(h)
        mu, logvar = stats[:, :self.latent_dim], stats[:, self.latent_dim:]
        return mu, logvar.clamp(*LOGVAR_RANGE)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = tuple(reversed(cfg.channel_widths))
        self.side = cfg.bottleneck_size
        self.from_latent = nn.Linear(cfg.latent_dim, widths[0] * self.side ** 2)
        blocks = []
        in_ch = widths[0]
        prev_stage = 0
        for b in range(cfg.decoder_blocks):
            stage = _stage_of(b, cfg.decoder_blocks, len(widths))
            blocks.append(ResidualBlock(in_ch, widths[stage], upsample=stage != prev_stage))
            in_ch, prev_stage = widths[stage], stage
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(in_ch, cfg.input_views, 3, 1, 1)
        self.channels = widths[0]

    def forward(self, z):
        h = F.relu(self.from_latent(z)).view(-1, self.channels, self.side, self.side)
        h = self.blocks(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.head(h))


def make_head(cfg: ModelConfig) -> Optional[nn.Module]:
    if cfg.head == "linear":
        return nn.Linear(cfg.latent_dim, 1)
    if cfg.head == "fcn":
        return nn.Sequential(nn.Linear(cfg.latent_dim, cfg.fcn_hidden), nn.ReLU(),
                             nn.Linear(cfg.fcn_hidden, 1))
    return None


class VAENet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = make_head(cfg)

    def encode(self, x):
        """Return ``(mu, sigma)``; sigma = exp(logvar / 2) is strictly positive."""
        mu, logvar = self.encoder(x)
        return mu, torch.exp(0.5 * logvar)

    def decode(self, z):
        return self.decoder(z)

    def regress(self, latent):
        if self.head is None:
            raise ValueError("model has no regression head")
        return self.head(latent).squeeze(-1)

    def head_output_layer(self) -> Optional[nn.Linear]:
        if self.head is None:
            return None
        return self.head if isinstance(self.head, nn.Linear) else self.head[-1]

    def forward(self, x, noise: Optional[torch.Tensor] = None):
        mu, sigma = self.encode(x)
        if noise is None:
            noise = torch.randn_like(mu)
        z = reparameterize(mu, sigma, noise)
        recon = self.decode(z)
        vol = None
        if self.head is not None:
            vol = self.regress(z if self.cfg.head_input == "z" else mu)
        return mu, sigma, z, recon, vol


def reparameterize(mu, sigma, zeta):
    """z = mu + zeta * sigma, elementwise."""
    if mu.shape != sigma.shape or mu.shape != zeta.shape:
        raise ValueError(f"dim mismatch: mu {tuple(mu.shape)}, sigma {tuple(sigma.shape)}, "
                         f"zeta {tuple(zeta.shape)}")
    return mu + zeta * sigma
