from .losses import bce, kld, mse, rvae_loss, vae_loss
from .network import ModelConfig, VAENet, reparameterize
from .training import (
    LatentDistribution,
    Sample,
    TrainConfig,
    TrainedModel,
    TrainingInterrupted,
    grid_search,
    train,
)

__all__ = [
    "LatentDistribution", "ModelConfig", "Sample", "TrainConfig", "TrainedModel",
    "TrainingInterrupted", "VAENet", "bce", "grid_search", "kld", "mse",
    "reparameterize", "rvae_loss", "train", "vae_loss",
]
