"""Volume canonicalization and 2D slice extraction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import io
from .phantom import LabelVolume, _rotation_matrix


@dataclass(frozen=True)
class CanonicalGrid:
    dims: tuple[int, int, int] = (164, 186, 176)
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError("grid dims must be three positive ints")
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise ValueError("grid spacing must be three positive values")


@dataclass
class SlicePair:
    coronal: np.ndarray
    transverse: Optional[np.ndarray] = None
    case_id: str = ""

    def __post_init__(self):
        self.coronal = np.asarray(self.coronal, dtype=np.uint8)
        if self.coronal.ndim != 2:
            raise ValueError("coronal slice must be 2D")
        if self.transverse is not None:
            self.transverse = np.asarray(self.transverse, dtype=np.uint8)
            if self.transverse.shape != self.coronal.shape:
                raise ValueError("coronal and transverse slices must share dims")
        for arr in self.views():
            if arr.max(initial=0) > 1:
                raise ValueError("slices must be binary")

    def views(self) -> list[np.ndarray]:
        return [self.coronal] if self.transverse is None else [self.coronal, self.transverse]

    def stack(self, n_views: Optional[int] = None) -> np.ndarray:
        """``[views, H, W]`` array; ``n_views=1`` drops the transverse view."""
        views = self.views()
        if n_views is not None:
            if n_views > len(views):
                raise ValueError(f"config mismatch: {n_views} views requested, "
                                 f"{len(views)} available")
            views = views[:n_views]
        return np.stack(views)

    def save(self, path) -> None:
        io.write_slice2d(path, self.stack(), self.case_id)

    @classmethod
    def load(cls, path) -> "SlicePair":
        arr, case_id = io.read_slice2d(path)
        return cls.from_stack(arr, case_id)

    @classmethod
    def from_stack(cls, arr: np.ndarray, case_id: str = "") -> "SlicePair":
        return cls(arr[0], arr[1] if len(arr) > 1 else None, case_id)

    def export_png(self, prefix) -> None:
        io.export_png(f"{prefix}_coronal.png", self.coronal)
        if self.transverse is not None:
            io.export_png(f"{prefix}_transverse.png", self.transverse)


def _nn_index(n_in: int, n_out: int, step_ratio: float) -> np.ndarray:
    # centre of output cell j, expressed in input cells
    idx = np.floor((np.arange(n_out) + 0.5) * step_ratio).astype(int)
    return np.clip(idx, 0, n_in - 1)


def resample_isotropic(vol: LabelVolume, target_mm: Sequence[float] = (1.0, 1.0, 1.0)) -> LabelVolume:
    """Nearest-neighbour resampling onto a grid with spacing ``target_mm``."""
    target = tuple(float(t) for t in target_mm)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError("target spacings must be positive")
    if target == vol.voxel_size_mm:
        return LabelVolume(vol.data.copy(), vol.voxel_size_mm, vol.case_id)
    out_dims = [max(1, int(round(n * s / t)))
                for n, s, t in zip(vol.shape, vol.voxel_size_mm, target)]
    idx = [_nn_index(n, m, t / s)
           for n, m, s, t in zip(vol.shape, out_dims, vol.voxel_size_mm, target)]
    data = vol.data[np.ix_(*idx)]
    return LabelVolume(data, target, vol.case_id)


def _centroid(data: np.ndarray) -> np.ndarray:
    return np.array(ndimage.center_of_mass(data))


def canonicalize(vol: LabelVolume, grid: CanonicalGrid = CanonicalGrid()) -> LabelVolume:
    """Translate the foreground centroid to the grid centre and pad/crop to ``grid.dims``."""
    if tuple(vol.voxel_size_mm) != tuple(float(v) for v in grid.voxel_size_mm):
        raise ValueError("volume spacing differs from the canonical grid; resample first")
    dims = np.array(grid.dims)
    out = np.zeros(grid.dims, dtype=np.uint8)
    if not vol.data.any():
        return LabelVolume(out, vol.voxel_size_mm, vol.case_id)
    coords = np.nonzero(vol.data)
    lo = np.array([c.min() for c in coords])
    hi = np.array([c.max() for c in coords])
    if np.any(hi - lo + 1 > dims):
        raise ValueError("grid overflow: foreground bounding box exceeds the canonical grid")
    shift = np.round((dims - 1) / 2.0 - _centroid(vol.data)).astype(int)
    # keep the bounding box inside the grid; costs centring only for near-full boxes
    shift = np.clip(shift, -lo, dims - 1 - hi)
    out[tuple(c + s for c, s in zip(coords, shift))] = 1
    return LabelVolume(out, vol.voxel_size_mm, vol.case_id)


def mode_filter_coronal(vol: LabelVolume, k: int = 7) -> LabelVolume:
    """Binary k-by-k majority filter applied to every coronal (fixed-y) slice.

    Pixels beyond the slice edge count as background, so the filter erodes
    corners of shapes that fill the slice.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError("invalid kernel: k must be odd and >= 1")
    kernel = np.ones((k, 1, k), dtype=np.int32)
    counts = ndimage.correlate(vol.data.astype(np.int32), kernel, mode="constant", cval=0)
    data = (counts > (k * k) // 2).astype(np.uint8)
    return LabelVolume(data, vol.voxel_size_mm, vol.case_id)


def _best_slice(areas: np.ndarray, centre: float) -> int:
    candidates = np.flatnonzero(areas == areas.max())
    # stable sort keeps the lower index first among equal distances
    order = np.argsort(np.abs(candidates - centre), kind="stable")
    return int(candidates[order[0]])


def resize_nearest(image: np.ndarray, out_size: int) -> np.ndarray:
    rows = _nn_index(image.shape[0], out_size, image.shape[0] / out_size)
    cols = _nn_index(image.shape[1], out_size, image.shape[1] / out_size)
    return image[np.ix_(rows, cols)]


def select_slices(vol: LabelVolume) -> tuple[int, int]:
    """Indices of the largest-area coronal (y) and transverse (z) slices."""
    data = vol.data
    if not data.any():
        raise ValueError("empty segmentation")
    cz, cy, _ = _centroid(data)
    y = _best_slice(data.sum(axis=(0, 2)), cy)
    z = _best_slice(data.sum(axis=(1, 2)), cz)
    return y, z


def extract_slices(vol: LabelVolume, out_size: int = 224, dual: bool = True) -> SlicePair:
    y, z = select_slices(vol)
    coronal = resize_nearest(vol.data[:, y, :], out_size)
    transverse = resize_nearest(vol.data[z, :, :], out_size) if dual else None
    return SlicePair(coronal, transverse, vol.case_id)


def rotate_about_centroid(vol: LabelVolume, angles_deg: Sequence[float]) -> LabelVolume:
    """Rotate by ``(about_z, about_y, about_x)`` degrees via inverse nearest-neighbour mapping."""
    if not vol.data.any() or not np.any(angles_deg):
        return LabelVolume(vol.data.copy(), vol.voxel_size_mm, vol.case_id)
    spacing = np.array(vol.voxel_size_mm)
    rot = _rotation_matrix(angles_deg)
    # output index -> input index: S^-1 R^T S (p - c) + c
    matrix = (rot.T * spacing[None, :]) / spacing[:, None]
    centre = _centroid(vol.data)
    offset = centre - matrix @ centre
    data = ndimage.affine_transform(vol.data, matrix, offset=offset, order=0,
                                    mode="constant", cval=0)
    return LabelVolume((data > 0).astype(np.uint8), vol.voxel_size_mm, vol.case_id)


def augment_rotate(vol: LabelVolume, max_deg: float = 15.0, seed: int = 0) -> LabelVolume:
    """Rotate by independent uniform angles in ``[-max_deg, max_deg]`` about z, y and x."""
    if max_deg < 0:
        raise ValueError("max_deg must be non-negative")
    angles = np.random.default_rng(seed).uniform(-max_deg, max_deg, size=3)
    return rotate_about_centroid(vol, angles)


@dataclass(frozen=True)
class PreprocessConfig:
    grid: CanonicalGrid = CanonicalGrid()
    mode_filter_k: int = 7
    image_size: int = 224
    n_augment: int = 8
    max_rotation_deg: float = 15.0


def preprocess_volume(vol: LabelVolume, cfg: PreprocessConfig = PreprocessConfig(),
                      seed: int = 0) -> tuple[SlicePair, list[SlicePair]]:
    """Full pipeline for one case: the clean slice pair plus augmented variants."""
    canon = canonicalize(resample_isotropic(vol, cfg.grid.voxel_size_mm), cfg.grid)
    smooth = mode_filter_coronal(canon, cfg.mode_filter_k)
    clean = extract_slices(smooth, cfg.image_size, dual=True)
    variants = []
    for i in range(cfg.n_augment):
        rotated = augment_rotate(smooth, cfg.max_rotation_deg, seed=seed * 1000 + i)
        variants.append(extract_slices(rotated, cfg.image_size, dual=True))
    return clean, variants
