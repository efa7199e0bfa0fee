import numpy as np
import pytest

from slicevol.phantom import (
    SPLENOMEGALY_THRESHOLD_ML,
    CaseRecord,
    DatasetConfig,
    PhantomParams,
    generate_phantom,
    make_dataset,
    manual_measurements,
    voxel_volume,
)
from slicevol.preprocess import CanonicalGrid, PreprocessConfig, preprocess_volume
from slicevol.vae.network import ModelConfig
from slicevol.vae.training import Sample

DESK_GRID = (82, 93, 88)
DESK_VOXEL = (2.0, 2.0, 2.0)
DESK_DATA = DatasetConfig(grid_dims=DESK_GRID, voxel_size_mm=DESK_VOXEL)


def desk_preprocess(image_size=32, n_augment=2):
    return PreprocessConfig(grid=CanonicalGrid(DESK_GRID, DESK_VOXEL), mode_filter_k=3,
                            image_size=image_size, n_augment=n_augment)


def build_samples(cases, pcfg):
    samples = []
    for i, (vol, rec) in enumerate(cases):
        clean, variants = preprocess_volume(vol, pcfg, seed=i)
        aug = np.stack([v.stack(2) for v in variants]) if variants else None
        samples.append(Sample(rec.case_id, rec.volume_mL, clean.stack(2), aug))
    return samples


def tiny_model_config(**kw):
    base = dict(latent_dim=16, image_size=32, encoder_blocks=2, decoder_blocks=2,
                channel_widths=(4, 8))
    return ModelConfig(**{**base, **kw})


@pytest.fixture(scope="session")
def tiny_cases():
    return make_dataset(10, 0.3, seed=3, config=DESK_DATA)


@pytest.fixture(scope="session")
def tiny_samples(tiny_cases):
    return build_samples(tiny_cases, desk_preprocess())


@pytest.fixture(scope="session")
def tiny_records(tiny_cases):
    return [rec for _, rec in tiny_cases]


def ellipsoid_cases(n, seed=0, voxel=2.0):
    """Axis-aligned ellipsoids with random semi-axes, as ``(LabelVolume, CaseRecord)``."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        rx, ry, rz = rng.uniform(25, 55), rng.uniform(15, 35), rng.uniform(40, 80)
        dims = tuple(int(np.ceil(2 * r / voxel)) + 6 for r in (rz, ry, rx))
        vol = generate_phantom(PhantomParams((rx, ry, rz), grid_dims=dims,
                                             voxel_size_mm=(voxel,) * 3), case_id=f"e{i:03d}")
        ml = voxel_volume(vol)
        rec = CaseRecord(vol.case_id, ml, ml > SPLENOMEGALY_THRESHOLD_ML,
                         manual_measurements(vol))
        cases.append((vol, rec))
    return cases


# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
