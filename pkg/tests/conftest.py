"""Shared fixtures: tiny model configs and synthetic data builders."""

import numpy as np
import pytest

from tsal360.encoders import EncoderConfig
from tsal360.geometry import ErpGrid, _haversine
from tsal360.model import ModelConfig, TrainingSample

# The tiny configuration used by gradient checks and training tests:
# 2 frames, 4 Fibonacci viewports (covering radius ~77 deg, so a 160 deg
# field of view covers the sphere), 32 px patches.
TINY_MODEL = dict(
    frames=2,
    viewports=4,
    heads=2,
    fov_deg=160.0,
    patch_res=32,
    reproject_height=16,
    output_height=32,
    decoder_widths=(16, 12, 8, 8),
    seed=11,
)
TINY_ENCODER = dict(global_dim=16, scale_channels=(8, 12, 16), token_len=6, patch_res=32, seed=11)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_encoder_cfg():
    return EncoderConfig(**TINY_ENCODER)


def spherical_cap(grid: ErpGrid, center_lon_deg: float, inner_deg: float = 88.5, outer_deg: float = 89.5):
    """A smooth cap map: 1 inside inner_deg of the center, tapering to 0 at outer_deg."""
    lat, lon = grid.pixel_latlon()
    glat = np.repeat(lat[:, None], grid.width, axis=1)
    glon = np.repeat(lon[None, :], grid.height, axis=0)
    d = np.rad2deg(_haversine(glat, glon, 0.0, np.deg2rad(center_lon_deg)))
    m = np.clip((outer_deg - d) / (outer_deg - inner_deg), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * m)


# token-disjoint prompts that survive truncation to the tiny token_len
PROMPT_EAST = "red ball bouncing near entrance"
PROMPT_WEST = "blue cube spinning above table"


def two_blob_dataset(n_pairs: int, seed: int = 7, shared_frames: bool = True):
    """Triplets whose ground truth is one of two near-complementary caps.

    The two caps are pixel-disjoint and strongly anticorrelated, so any
    text-blind predictor's mean CC over a balanced sample set is structurally
    capped well below 0.2, while a text-aware model can reach CC near 1 by
    routing on the prompt.
    """
    grid = ErpGrid(32, 64)
    east = spherical_cap(grid, 90.0)
    west = spherical_cap(grid, -90.0)
    assert float((east * west).max()) == 0.0
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.0, 1.0, (2, 3, 32, 64)).astype(np.float32)
    samples = []
    for i in range(n_pairs):
        frames = base if shared_frames else rng.uniform(0, 1, base.shape).astype(np.float32)
        key = "shared" if shared_frames else f"pair{i}"
        samples.append(TrainingSample(text=PROMPT_EAST, gt=east, frames=frames, key=f"{key}-e"))
        samples.append(TrainingSample(text=PROMPT_WEST, gt=west, frames=frames, key=f"{key}-w"))
    return samples, east, west
