"""Synthetic data generators used by the test harness and the CLI.

Everything here is deterministic in (seed, parameters); no real satellite
data is required to exercise the pipeline end to end.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .datacube import DataCube, TileRecord, attach_mask
from .rng import stream


def textured_cubes(n: int, bands: int = 4, temporal: int = 1, size: int = 64,
                   seed: int = 0) -> np.ndarray:
    """(n, C, T, H, W) cubes of oriented sinusoidal gratings plus noise.

    The gratings give the autoencoder structure worth reconstructing;
    pure noise would make any reconstruction loss flat.
    """
    rng = stream(seed, "fixtures/textured")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((n, bands, temporal, size, size), dtype=np.float32)
    for i in range(n):
        for c in range(bands):
            for t in range(temporal):
                freq = rng.uniform(0.05, 0.45)
                theta = rng.uniform(0.0, np.pi)
                phase = rng.uniform(0.0, 2 * np.pi)
                wave = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                              + phase)
                img = 0.5 + 0.35 * wave + rng.normal(0.0, 0.02, (size, size))
                out[i, c, t] = np.clip(img, 0.0, 1.0)
    return out


def water_tile(rng: np.random.Generator, size: int = 64,
               bands: int = 4) -> Tuple[np.ndarray, np.ndarray]:
    """One (C,T,H,W) tile and its (H,W) water mask.

    Water is a random rectangle where green reflectance rises and NIR
    falls, so the classes are linearly separable per pixel and the NDWI
    is strongly positive over water.
    """
    mask = np.zeros((size, size), dtype=np.int64)
    y, x = rng.integers(0, size // 2, 2)
    h, w = rng.integers(size // 4, size // 2, 2)
    mask[y:y + h, x:x + w] = 1
    tile = rng.normal(0.35, 0.04, (bands, 1, size, size)).astype(np.float32)
    tile[1] += 0.35 * mask           # green
    tile[3] -= 0.25 * mask           # NIR
    return np.clip(tile, 0.0, 1.0), mask


def water_records(n: int, seed: int = 0, size: int = 64,
                  n_products: int = 4) -> List[TileRecord]:
    """Segmentation records spread over ``n_products`` synthetic products."""
    rng = stream(seed, "fixtures/water")
    records = []
    for i in range(n):
        tile, mask = water_tile(rng, size)
        rec = TileRecord(tile, product_id=f"product-{i % n_products:02d}")
        attach_mask(rec, mask, threshold=0.10)
        records.append(rec)
    return records


def classifier_records(n: int, seed: int = 0, size: int = 64,
                       positive_fraction: float = 0.5) -> List[TileRecord]:
    """Tile-classification records separable by spectral shape.

    Positives are green-dominant, negatives NIR-dominant.  A band-ratio
    contrast keeps the classes apart through the encoder's layer norms,
    which would erase a pure global-brightness offset.
    """
    rng = stream(seed, "fixtures/classifier")
    records = []
    for i in range(n):
        label = int(rng.random() < positive_fraction)
        tile = rng.normal(0.3, 0.05, (4, 1, size, size)).astype(np.float32)
        tile[1 if label else 3] += 0.3
        records.append(TileRecord(np.clip(tile, 0.0, 1.0), tile_label=label,
                                  product_id=f"product-{i % 4:02d}"))
    return records


def regression_records(n: int, seed: int = 0, size: int = 64) -> List[TileRecord]:
    """Regression records: target is a smooth field, zero outside a blob."""
    rng = stream(seed, "fixtures/regression")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    records = []
    for _ in range(n):
        cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
        r = rng.uniform(size * 0.15, size * 0.35)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        target = np.where(d2 < r * r, 1.0 + np.sqrt(np.maximum(r * r - d2, 0)) / r,
                          0.0).astype(np.float32)
        tile = rng.normal(0.35, 0.04, (4, 1, size, size)).astype(np.float32)
        tile[2] += 0.1 * target
        records.append(TileRecord(np.clip(tile, 0.0, 1.0),
                                  mask=target, product_id="product-00"))
    return records


def hazy_scene(seed: int = 0, h: int = 256, w: int = 256, slope: float = 2.0,
               noise: float = 0.001, haze_fraction: float = 0.05):
    """(blue, red, haze_mask) with clear pixels on the line red = slope*blue.

    Haze pixels get a strong blue boost, pulling them off the clear-sky
    line so a haze-optimized transform separates them.  A small dark-pixel
    population gives the lowest-blue candidate set enough blue spread for
    a stable line fit; a uniformly lit scene would cram the darkest 0.15%
    of pixels into a noise-dominated sliver.
    """
    rng = stream(seed, "fixtures/haze")
    blue = rng.uniform(0.12, 0.30, (h, w))
    dark = rng.random((h, w)) < 0.01
    blue = np.where(dark, rng.uniform(0.02, 0.12, (h, w)), blue)
    red = slope * blue + rng.normal(0.0, noise, (h, w))
    haze = rng.random((h, w)) < haze_fraction
    blue = np.where(haze, blue + rng.uniform(0.25, 0.45, (h, w)), blue)
    return blue, red, haze


def water_scene_cube(seed: int = 0, size: int = 128) -> Tuple[DataCube, np.ndarray]:
    """A 4-band cube whose nearest-band NDWI cleanly separates a lake."""
    rng = stream(seed, "fixtures/water-cube")
    mask = np.zeros((size, size), dtype=np.int64)
    y, x = rng.integers(0, size // 2, 2)
    h, w = rng.integers(size // 4, size // 2, 2)
    mask[y:y + h, x:x + w] = 1
    data = rng.normal(0.35, 0.03, (4, 1, size, size)).astype(np.float32)
    data[1, 0] += 0.35 * mask
    data[3, 0] -= 0.25 * mask
    cube = DataCube(np.clip(data, 0.0, 1.0),
                    np.array([0.49, 0.60, 0.66, 0.87], dtype=np.float32),
                    product_id=f"water-{seed}")
    return cube, mask


def geometry_raw(seed: int = 0, h: int = 1792, w: int = 2464,
                 bands: int = 4, sentinel_fraction: float = 0.001,
                 negative_fraction: float = 0.001) -> np.ndarray:
    """Raw (C,T,H,W) counts with missing-value sentinels and negatives."""
    rng = stream(seed, "fixtures/geometry")
    raw = rng.uniform(0.0, 8000.0, (bands, 1, h, w)).astype(np.float32)
    flat = raw.reshape(-1)
    n = flat.size
    sent = rng.choice(n, size=int(sentinel_fraction * n), replace=False)
    neg = rng.choice(n, size=int(negative_fraction * n), replace=False)
    flat[sent] = 32767.0
    flat[neg] = -flat[neg] - 1.0
    return raw


def wavelength_table(n_bands: int = 50, lo: float = 0.40,
                     hi: float = 2.50) -> np.ndarray:
    """Evenly spaced hyperspectral band centres in micrometres."""
    return np.linspace(lo, hi, n_bands).astype(np.float32)
