"""Synthetic spleen-like voxel phantoms, ground-truth volumetry and manual measurements.

Arrays are indexed ``[z, y, x]``: z runs superior-inferior (transverse slices
are fixed-z), y anterior-posterior (coronal slices are fixed-y), x left-right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.spatial import ConvexHull, QhullError

from . import io

SPLENOMEGALY_THRESHOLD_ML = 314.5


@dataclass
class LabelVolume:
    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"LabelVolume needs a 3D array, got shape {data.shape}")
        if data.dtype != np.uint8:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("LabelVolume data must be binary")
            data = data.astype(np.uint8)
        elif data.max(initial=0) > 1:
            raise ValueError("LabelVolume data must be binary")
        self.data = data
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise ValueError("voxel spacings must be three positive values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_mm3(self) -> float:
        return float(np.prod(self.voxel_size_mm))

    def save(self, path) -> None:
        io.write_seg3d(path, self.data, self.voxel_size_mm, self.case_id)

    @classmethod
    def load(cls, path) -> "LabelVolume":
        data, spacing, case_id = io.read_seg3d(path)
        return cls(data, spacing, case_id)


@dataclass
class PhantomParams:
    """Shape controls for :func:`generate_phantom`.

    ``base_semi_axes_mm`` is ``(rx, ry, rz)``. ``exponent`` is the superellipsoid
    power (2 gives an ellipsoid), ``lobulation`` the relative amplitude of a
    seed-driven low-order surface ripple.
    """

    base_semi_axes_mm: tuple[float, float, float]
    bend_strength: float = 0.0
    taper_strength: float = 0.0
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    grid_dims: tuple[int, int, int] = (164, 186, 176)
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    target_volume_mL: Optional[float] = None
    exponent: float = 2.0
    lobulation: float = 0.0

    def validate(self) -> None:
        if len(self.base_semi_axes_mm) != 3 or min(self.base_semi_axes_mm) <= 0:
            raise ValueError("semi-axes must be three positive values")
        if not 0.0 <= self.bend_strength <= 1.0:
            raise ValueError("bend_strength must lie in [0, 1]")
        if not 0.0 <= self.taper_strength <= 1.0:
            raise ValueError("taper_strength must lie in [0, 1]")
        if len(self.grid_dims) != 3 or min(self.grid_dims) <= 0:
            raise ValueError("grid_dims must be three positive ints")
        if len(self.voxel_size_mm) != 3 or min(self.voxel_size_mm) <= 0:
            raise ValueError("voxel spacings must be three positive values")
        if self.target_volume_mL is not None and self.target_volume_mL <= 0:
            raise ValueError("target_volume_mL must be positive")
        if self.exponent <= 0:
            raise ValueError("exponent must be positive")
        if not 0.0 <= self.lobulation < 0.5:
            raise ValueError("lobulation must lie in [0, 0.5)")


@dataclass(frozen=True)
class ManualMeasurements:
    length_mm: float
    max_width_mm: float
    thickness_at_hilum_mm: float

    def as_features(self) -> tuple[float, float, float]:
        return self.length_mm, self.max_width_mm, self.thickness_at_hilum_mm


@dataclass
class CaseRecord:
    case_id: str
    volume_mL: float
    splenomegaly: bool
    measurements: ManualMeasurements
    fold: Optional[int] = None

    def __post_init__(self):
        if self.volume_mL <= 0:
            raise ValueError(f"{self.case_id}: volume must be positive")
        if self.splenomegaly != (self.volume_mL > SPLENOMEGALY_THRESHOLD_ML):
            raise ValueError(f"{self.case_id}: splenomegaly flag disagrees with volume")


def _rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """Rotation acting on ``(z, y, x)`` coordinate vectors; angles about z, y, x."""
    az, ay, ax = (math.radians(a) for a in angles_deg)
    # about the z axis: mixes y and x
    rz = np.array([[1, 0, 0],
                   [0, math.cos(az), -math.sin(az)],
                   [0, math.sin(az), math.cos(az)]])
    # about y: mixes z and x
    ry = np.array([[math.cos(ay), 0, math.sin(ay)],
                   [0, 1, 0],
                   [-math.sin(ay), 0, math.cos(ay)]])
    # about x: mixes z and y
    rx = np.array([[math.cos(ax), -math.sin(ax), 0],
                   [math.sin(ax), math.cos(ax), 0],
                   [0, 0, 1]])
    return rz @ ry @ rx


def _ripple_coefficients(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    # (amplitude, freq_theta, freq_phi, phase) for a handful of harmonics
    coeffs = np.empty((4, 4))
    coeffs[:, 0] = rng.normal(size=4)
    coeffs[:, 1] = rng.integers(1, 4, size=4)
    coeffs[:, 2] = rng.integers(1, 4, size=4)
    coeffs[:, 3] = rng.uniform(0, 2 * np.pi, size=4)
    coeffs[:, 0] /= np.abs(coeffs[:, 0]).sum()
    return coeffs


def _voxelize(params: PhantomParams, scale: float, ripple: Optional[np.ndarray]) -> np.ndarray:
    dims = params.grid_dims
    sz, sy, sx = params.voxel_size_mm
    rx, ry, rz = (a * scale for a in params.base_semi_axes_mm)
    z = (np.arange(dims[0]) - (dims[0] - 1) / 2.0) * sz
    y = (np.arange(dims[1]) - (dims[1] - 1) / 2.0) * sy
    x = (np.arange(dims[2]) - (dims[2] - 1) / 2.0) * sx
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij", sparse=True)

    # world -> body frame via the inverse rotation
    rot = _rotation_matrix(params.rotation_deg).T
    bz = rot[0, 0] * zz + rot[0, 1] * yy + rot[0, 2] * xx
    by = rot[1, 0] * zz + rot[1, 1] * yy + rot[1, 2] * xx
    bx = rot[2, 0] * zz + rot[2, 1] * yy + rot[2, 2] * xx

    t = bz / rz
    # bend: the medial axis is a parabola displaced along x
    bx = bx - params.bend_strength * rx * t * t
    # taper: cross-section scales linearly along the long axis, kept positive
    s = 1.0 + 0.5 * params.taper_strength * np.clip(t, -1.0, 1.0)
    e = params.exponent
    level = (np.abs(bx / (rx * s)) ** e + np.abs(by / (ry * s)) ** e + np.abs(t) ** e)
    if ripple is not None and params.lobulation > 0:
        theta = np.arctan2(by, bx)
        phi = np.arctan2(np.hypot(bx / rx, by / ry), t)
        wobble = 0.0
        for amp, ft, fp, phase in ripple:
            wobble = wobble + amp * np.cos(ft * theta + phase) * np.sin(fp * phi)
        level = level * (1.0 + params.lobulation * wobble) ** -e
    return (level <= 1.0).astype(np.uint8)


def _touches_border(mask: np.ndarray) -> bool:
    return bool(mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()
                or mask[:, :, 0].any() or mask[:, :, -1].any())


def generate_phantom(params: PhantomParams, seed: int = 0, case_id: str = "") -> LabelVolume:
    """Voxelize a deformed superellipsoid.

    With ``target_volume_mL`` set, the semi-axes are rescaled uniformly until the
    voxel volume lands within 1% of the target (5% is the hard failure bound).
    """
    params.validate()
    ripple = _ripple_coefficients(seed) if params.lobulation > 0 else None
    voxel_ml = float(np.prod(params.voxel_size_mm)) / 1000.0

    scale = 1.0
    mask = _voxelize(params, scale, ripple)
    if params.target_volume_mL is not None:
        target = params.target_volume_mL
        grid_ml = float(np.prod(params.grid_dims)) * voxel_ml
        if target >= grid_ml:
            raise ValueError(f"target infeasible: {target:.1f} mL exceeds grid capacity")
        best = None
        for _ in range(12):
            vol = mask.sum() * voxel_ml
            rel = abs(vol - target) / target
            if best is None or rel < best[0]:
                best = (rel, mask)
            if rel <= 0.01:
                break
            ratio = target / vol if vol > 0 else 8.0
            scale *= min(ratio, 8.0) ** (1.0 / 3.0)
            mask = _voxelize(params, scale, ripple)
        rel, mask = best
        if rel > 0.05:
            raise ValueError(f"target infeasible: closest voxel volume is {rel:.1%} off")
    if _touches_border(mask):
        raise ValueError("grid overflow: phantom touches the grid boundary")
    if not mask.any():
        raise ValueError("target infeasible: phantom is empty at this resolution")
    return LabelVolume(mask, tuple(params.voxel_size_mm), case_id)


def voxel_volume(vol: LabelVolume) -> float:
    """Foreground voxel count times voxel-cell volume, in mL."""
    return int(np.count_nonzero(vol.data)) * vol.voxel_mm3 / 1000.0


def _max_chord(points: np.ndarray) -> tuple[float, np.ndarray]:
    """Largest pairwise distance among 2D points and the chord direction."""
    if len(points) < 2:
        return 0.0, np.array([1.0, 0.0])
    candidates = points
    if len(points) > 3:
        try:
            candidates = points[ConvexHull(points).vertices]
        except QhullError:
            # collinear: the extremes along the principal line suffice
            candidates = points
    diff = candidates[:, None, :] - candidates[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    chord = candidates[j] - candidates[i]
    length = float(np.sqrt(d2[i, j]))
    direction = chord / length if length > 0 else np.array([1.0, 0.0])
    return length, direction


def manual_measurements(vol: LabelVolume) -> ManualMeasurements:
    """Length, maximal transverse width and perpendicular thickness, in mm.

    Length counts the transverse (fixed-z) slices that contain foreground.
    Width is the largest centre-to-centre pixel distance within one transverse
    slice. Thickness is the extent perpendicular to that chord on the same
    slice, which stands in for the hilum thickness.
    """
    data = vol.data
    if not data.any():
        raise ValueError("empty segmentation")
    sz, sy, sx = vol.voxel_size_mm
    occupied = np.flatnonzero(data.any(axis=(1, 2)))
    length = len(occupied) * sz

    best_width, best_pts, best_dir = -1.0, None, None
    for k in occupied:
        iy, ix = np.nonzero(data[k])
        # slice-local origin keeps results bit-identical under translation
        pts = np.column_stack([(iy - iy.min()) * sy, (ix - ix.min()) * sx]).astype(float)
        width, direction = _max_chord(pts)
        if width > best_width:
            best_width, best_pts, best_dir = width, pts, direction
    normal = np.array([-best_dir[1], best_dir[0]])
    proj = best_pts @ normal
    thickness = float(proj.max() - proj.min())
    return ManualMeasurements(float(length), float(best_width), thickness)


@dataclass
class VolumeRanges:
    normal_mL: tuple[float, float] = (80.0, 310.0)
    normal_mean_sd: tuple[float, float] = (200.0, 70.0)
    splenomegaly_mL: tuple[float, float] = (320.0, 1650.0)
    splenomegaly_mean_sd: tuple[float, float] = (1004.75, 644.27)


@dataclass
class DatasetConfig:
    grid_dims: tuple[int, int, int] = (164, 186, 176)
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    ranges: VolumeRanges = field(default_factory=VolumeRanges)
    max_rotation_deg: float = 20.0
    max_bend: float = 0.6
    max_taper: float = 0.6
    max_lobulation: float = 0.05


def _truncnorm(rng, lo, hi, mean, sd) -> float:
    a, b = (lo - mean) / sd, (hi - mean) / sd
    return float(stats.truncnorm.rvs(a, b, loc=mean, scale=sd, random_state=rng))


def _random_params(rng, target_ml: float, cfg: DatasetConfig, roundness: float) -> PhantomParams:
    # long axis is superior-inferior; roundness in [0, 1] pulls the ratios toward a sphere
    rx_ratio = rng.uniform(0.55, 0.85)
    ry_ratio = rng.uniform(0.40, 0.65)
    rx_ratio += (1.0 - rx_ratio) * roundness
    ry_ratio += (1.0 - ry_ratio) * roundness
    rz = (target_ml * 1000.0 / (4.0 / 3.0 * math.pi * rx_ratio * ry_ratio)) ** (1.0 / 3.0)
    rot = cfg.max_rotation_deg
    return PhantomParams(
        base_semi_axes_mm=(rz * rx_ratio, rz * ry_ratio, rz),
        bend_strength=float(rng.uniform(0.0, cfg.max_bend)),
        taper_strength=float(rng.uniform(0.0, cfg.max_taper)),
        rotation_deg=tuple(float(a) for a in rng.uniform(-rot, rot, size=3)),
        grid_dims=tuple(cfg.grid_dims),
        voxel_size_mm=tuple(cfg.voxel_size_mm),
        target_volume_mL=target_ml,
        exponent=float(rng.uniform(1.8, 2.6)),
        lobulation=float(rng.uniform(0.0, cfg.max_lobulation)),
    )


def _sample_case(rng, enlarged: bool, cfg: DatasetConfig, case_id: str):
    r = cfg.ranges
    lo, hi = r.splenomegaly_mL if enlarged else r.normal_mL
    mean, sd = r.splenomegaly_mean_sd if enlarged else r.normal_mean_sd
    target = _truncnorm(rng, lo, hi, mean, sd)
    shape_seed = int(rng.integers(2**31))
    for attempt in range(40):
        params = _random_params(rng, target, cfg, roundness=min(1.0, attempt / 10.0))
        try:
            vol = generate_phantom(params, seed=shape_seed, case_id=case_id)
        except ValueError:
            continue
        ml = voxel_volume(vol)
        if (ml > SPLENOMEGALY_THRESHOLD_ML) == enlarged:
            return vol, ml
    raise ValueError(f"target infeasible: could not place a {target:.0f} mL phantom in the grid")


def make_dataset(n: int, splenomegaly_fraction: float, out_dir=None, seed: int = 0,
                 config: Optional[DatasetConfig] = None):
    """Generate ``n`` phantoms and (optionally) write volumes plus ``manifest.csv``.

    Returns a list of ``(LabelVolume, CaseRecord)`` pairs in case order.
    """
    if n <= 0:
        raise ValueError("invalid size: n must be positive")
    if not 0.0 <= splenomegaly_fraction <= 1.0:
        raise ValueError("splenomegaly_fraction must lie in [0, 1]")
    cfg = config or DatasetConfig()
    n_enlarged = int(round(n * splenomegaly_fraction))
    rng = np.random.default_rng(seed)
    enlarged = np.zeros(n, dtype=bool)
    enlarged[rng.permutation(n)[:n_enlarged]] = True

    cases = []
    for i in range(n):
        case_id = f"case{i:04d}"
        # one child stream per case keeps cases independent of each other's retries
        case_rng = np.random.default_rng([seed, i])
        vol, ml = _sample_case(case_rng, bool(enlarged[i]), cfg, case_id)
        rec = CaseRecord(case_id, ml, ml > SPLENOMEGALY_THRESHOLD_ML, manual_measurements(vol))
        cases.append((vol, rec))

    if out_dir is not None:
        out = Path(out_dir)
        for vol, rec in cases:
            vol.save(out / "volumes" / f"{rec.case_id}.seg3d")
        write_manifest(out / "manifest.csv", [rec for _, rec in cases])
    return cases


MANIFEST_HEADER = ("case_id", "volume_mL", "splenomegaly", "L_mm", "W_mm", "Th_mm", "fold")


def write_manifest(path, records: Sequence[CaseRecord]) -> None:
    rows = []
    for rec in records:
        m = rec.measurements
        rows.append((rec.case_id, rec.volume_mL, rec.splenomegaly, m.length_mm,
                     m.max_width_mm, m.thickness_at_hilum_mm,
                     "" if rec.fold is None else rec.fold))
    io.write_csv(path, MANIFEST_HEADER, rows)


def read_manifest(path) -> list[CaseRecord]:
    records = []
    for row in io.read_csv(path):
        missing = [k for k in MANIFEST_HEADER[:-1] if k not in row or row[k] in ("", None)]
        if missing:
            raise ValueError(f"{path}: manifest row {row.get('case_id')} lacks {missing}")
        fold = row.get("fold")
        records.append(CaseRecord(
            case_id=row["case_id"],
            volume_mL=float(row["volume_mL"]),
            splenomegaly=row["splenomegaly"].lower() == "true",
            measurements=ManualMeasurements(float(row["L_mm"]), float(row["W_mm"]),
                                            float(row["Th_mm"])),
            fold=int(fold) if fold not in (None, "") else None,
        ))
    return records


def with_fold(record: CaseRecord, fold: Optional[int]) -> CaseRecord:
    return replace(record, fold=fold)
