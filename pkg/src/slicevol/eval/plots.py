"""SVG figures: predicted-vs-true scatter and latent PCA scatter.

Output is byte-stable across reruns: no date metadata and a fixed id salt.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..phantom import SPLENOMEGALY_THRESHOLD_ML  # noqa: E402

_RC = {"svg.hashsalt": "slicevol", "svg.fonttype": "none"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_predicted_vs_true(series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
                           path, title: str = "") -> Path:
    """``series`` maps a method name to ``(true volumes, predicted volumes)``."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.5, 5))
        hi = 0.0
        for name, (truth, pred) in series.items():
            ax.scatter(truth, pred, s=14, label=name, alpha=0.8)
            hi = max(hi, float(np.max(truth)), float(np.max(pred)))
        hi *= 1.05
        ax.plot([0, hi], [0, hi], color="grey", lw=1, ls="--")
        ax.axvline(SPLENOMEGALY_THRESHOLD_ML, color="grey", lw=0.6, ls=":")
        ax.axhline(SPLENOMEGALY_THRESHOLD_ML, color="grey", lw=0.6, ls=":")
        ax.set(xlim=(0, hi), ylim=(0, hi), xlabel="true volume (mL)",
               ylabel="predicted volume (mL)", title=title)
        ax.legend(fontsize=8)
        return _save(fig, path)


def plot_latent_pca(coords: np.ndarray, volumes: Sequence[float], path,
                    variances: Sequence[float] = (), title: str = "") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.5, 4.5))
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=np.asarray(volumes), cmap="viridis", s=16)
        fig.colorbar(sc, ax=ax, label="volume (mL)")
        labels = ["PC1", "PC2"]
        if len(variances) == 2:
            labels = [f"PC{i + 1} (var {v:.3g})" for i, v in enumerate(variances)]
        ax.set(xlabel=labels[0], ylabel=labels[1], title=title)
        return _save(fig, path)
