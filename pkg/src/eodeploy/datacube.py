"""Data-cube ingestion, band selection, tiling, labelling, splitting, and
class-imbalance sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import formats
from .rng import stream

MISSING_SENTINEL = 32767.0
CLOUD_TILE_THRESHOLD = 0.70
NEAR_ZERO_CLOUD = 0.01
BAND_MATCH_TOLERANCE_UM = 0.05

# RGB + NIR centre wavelengths used across missions (micrometres)
DEFAULT_BAND_TARGETS = (0.49, 0.60, 0.66, 0.87)


@dataclass
class DataCube:
    data: np.ndarray                  # (C,T,H,W) reflectance in [0,1]
    wavelengths: np.ndarray           # (C,) centre wavelengths, micrometres
    product_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"cube data must be (C,T,H,W), got {self.data.shape}")
        if self.wavelengths.shape != (self.data.shape[0],):
            raise ValueError("one wavelength per band required")


@dataclass
class TileRecord:
    tile: np.ndarray                  # (C,T,h,w)
    mask: Optional[np.ndarray] = None  # (h,w) int, -1 allowed
    tile_label: Optional[int] = None
    cloud_ratio: Optional[float] = None
    product_id: str = ""

    def __post_init__(self):
        if self.mask is not None and self.cloud_ratio is None:
            self.cloud_ratio = float((self.mask > 0).mean())


@dataclass
class SamplingPlan:
    strategy: str                     # weighted-1to1 | downsample-clear
    weights: Optional[np.ndarray] = None
    keep: Optional[np.ndarray] = None
    seed: int = 0


# ---------------------------------------------------------------------------
# ingestion

def normalize_cube(raw: np.ndarray, wavelengths, product_id: str = "",
                   mode: str = "per-band-minmax",
                   fixed_scale: float = 10000.0) -> DataCube:
    """Clip negatives, zero the 32767 missing-value sentinel, normalize
    each band to [0,1].  Idempotent on already-normalized data."""
    x = np.asarray(raw, dtype=np.float32).copy()
    x[x < 0] = 0.0
    x[x == MISSING_SENTINEL] = 0.0
    if mode == "per-band-minmax":
        for c in range(x.shape[0]):
            band = x[c]
            lo, hi = band.min(), band.max()
            x[c] = (band - lo) / (hi - lo) if hi > lo else 0.0
    elif mode == "fixed-scale":
        x = np.clip(x / fixed_scale, 0.0, 1.0)
    else:
        raise ValueError(f"unknown normalization mode '{mode}'")
    return DataCube(x, wavelengths, product_id)


def ingest_cube(source, product_id: str = "",
                mode: str = "per-band-minmax") -> DataCube:
    """Load an .eocube file (path or bytes) and normalize it."""
    if isinstance(source, (str, Path)):
        buf = Path(source).read_bytes()
        if not product_id:
            product_id = Path(source).stem
    else:
        buf = source
    data, wavelengths = formats.read_eocube(buf)
    if wavelengths is None:
        raise formats.FormatError("cube carries no wavelength table")
    return normalize_cube(data, wavelengths, product_id, mode=mode)


def select_bands(cube: DataCube, targets: Sequence[float]) -> DataCube:
    """Nearest-wavelength band per target, in target order."""
    idx = []
    for t in targets:
        dist = np.abs(cube.wavelengths - t)
        j = int(np.argmin(dist))
        if dist[j] > BAND_MATCH_TOLERANCE_UM:
            raise ValueError(f"no band within {BAND_MATCH_TOLERANCE_UM} um of "
                             f"{t} um (closest: {cube.wavelengths[j]:.3f} um)")
        idx.append(j)
    return DataCube(cube.data[idx], cube.wavelengths[idx], cube.product_id)


def band_image(cube: DataCube, wavelength_um: float) -> np.ndarray:
    """First-timestep H x W image of the band nearest to a wavelength."""
    one = select_bands(cube, [wavelength_um])
    return one.data[0, 0]


# ---------------------------------------------------------------------------
# tiling and labelling

def tile_cube(cube: DataCube, tile_size: int) -> List[TileRecord]:
    """Row-major disjoint tiles; partial edges are dropped."""
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    _, _, h, w = cube.data.shape
    ny, nx = h // tile_size, w // tile_size
    if ny * nx == 0:
        warnings.warn(f"cube {cube.product_id or '<anon>'} of size {h}x{w} "
                      f"yields no {tile_size}x{tile_size} tiles")
        return []
    records = []
    for i in range(ny):
        for j in range(nx):
            tile = cube.data[:, :, i * tile_size:(i + 1) * tile_size,
                             j * tile_size:(j + 1) * tile_size]
            records.append(TileRecord(tile.copy(), product_id=cube.product_id))
    return records


def tile_label(mask: np.ndarray, threshold: float = CLOUD_TILE_THRESHOLD) -> int:
    """1 iff the positive-pixel fraction strictly exceeds the threshold."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("tile_label on an empty mask")
    return int((mask > 0).mean() > threshold)


def attach_mask(record: TileRecord, mask: np.ndarray,
                threshold: float = CLOUD_TILE_THRESHOLD) -> TileRecord:
    record.mask = np.asarray(mask)
    record.cloud_ratio = float((record.mask > 0).mean())
    record.tile_label = tile_label(record.mask, threshold)
    return record


# ---------------------------------------------------------------------------
# splitting and sampling

def split_by_product(records: Sequence[TileRecord], test_fraction: float,
                     seed: int) -> Tuple[List[TileRecord], List[TileRecord]]:
    """Product-level split: all of a product's tiles land in one side."""
    products = sorted({r.product_id for r in records})
    if len(products) < 2:
        raise ValueError("product split needs at least 2 distinct products")
    rng = stream(seed, "split-by-product")
    order = list(rng.permutation(products))
    n_test = int(round(test_fraction * len(products)))
    n_test = min(max(n_test, 1), len(products) - 1)
    test_ids = set(order[:n_test])
    train = [r for r in records if r.product_id not in test_ids]
    test = [r for r in records if r.product_id in test_ids]
    return train, test


def make_sampling_plan(records: Sequence[TileRecord], strategy: str,
                       seed: int) -> SamplingPlan:
    if strategy == "weighted-1to1":
        labels = np.array([r.tile_label for r in records])
        if any(l is None for l in (r.tile_label for r in records)):
            raise ValueError("weighted-1to1 needs tile labels on every record")
        n_pos = int((labels == 1).sum())
        n_neg = int((labels == 0).sum())
        if n_pos == 0:
            raise ValueError("weighted-1to1 sampling with zero positive tiles")
        pos_weight = n_neg / n_pos if n_pos else 1.0
        weights = np.where(labels == 1, pos_weight, 1.0).astype(np.float64)
        return SamplingPlan("weighted-1to1", weights=weights, seed=seed)
    if strategy == "downsample-clear":
        ratios = np.array([r.cloud_ratio for r in records], dtype=np.float64)
        if np.any(np.isnan(ratios)):
            raise ValueError("downsample-clear needs cloud_ratio on every record")
        high = ratios >= CLOUD_TILE_THRESHOLD
        near_zero = ratios < NEAR_ZERO_CLOUD
        keep = np.ones(len(records), dtype=bool)
        nz_idx = np.flatnonzero(near_zero)
        target = int(high.sum())
        if len(nz_idx) > target:
            rng = stream(seed, "downsample-clear")
            kept = rng.choice(nz_idx, size=target, replace=False)
            keep[nz_idx] = False
            keep[kept] = True
        return SamplingPlan("downsample-clear", keep=keep, seed=seed)
    raise ValueError(f"unknown sampling strategy '{strategy}'")


def draw_epoch(plan: SamplingPlan, n_draws: int,
               rng: np.random.Generator) -> np.ndarray:
    """Sample record indices for one epoch under a weighted-1to1 plan."""
    if plan.strategy != "weighted-1to1":
        raise ValueError("draw_epoch applies to weighted-1to1 plans only")
    p = plan.weights / plan.weights.sum()
    return rng.choice(len(plan.weights), size=n_draws, replace=True, p=p)


def apply_plan(plan: SamplingPlan,
               records: Sequence[TileRecord]) -> List[TileRecord]:
    """Materialize a downsample-clear plan as a filtered record list."""
    if plan.strategy != "downsample-clear":
        raise ValueError("apply_plan applies to downsample-clear plans only")
    return [r for r, k in zip(records, plan.keep) if k]


def subsample_labels(records: Sequence[TileRecord], fraction: float,
                     seed: int) -> List[TileRecord]:
    """Uniform label subsample; subsets are nested across fractions, so the
    25% subset of a seed is contained in its 50% subset."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0,1]")
    n = len(records)
    k = int(round(fraction * n))
    if k < 1:
        raise ValueError(f"fraction {fraction} of {n} records yields nothing")
    if k == n:
        return list(records)
    order = stream(seed, "label-subsample").permutation(n)
    picked = sorted(order[:k])
    return [records[i] for i in picked]


# ---------------------------------------------------------------------------
# tile manifests (tab-separated, one record per line)

def write_manifest(path, rows: Sequence[Tuple[str, str, str, str, str]]):
    """Rows are (tile_path, mask_path, label, cloud_ratio, product_id);
    empty strings for absent fields."""
    lines = ["\t".join(row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> List[Tuple[str, str, str, str, str]]:
    rows = []
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"manifest line {ln}: expected 5 fields, got "
                             f"{len(parts)}")
        rows.append(tuple(parts))
    return rows
