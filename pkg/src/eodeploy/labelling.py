"""Automated proxy ground truth: NDWI water masks and HOT cloud masks,
both thresholded with Otsu's method."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .datacube import DataCube, band_image

CANDIDATE_FRACTION = 0.0015       # lowest-blue pixels feeding the line fit
N_BINS = 20
PIXELS_PER_BIN = 20


@dataclass
class ClearSkyLine:
    m: float                      # slope (dimensionless)
    b: float                      # intercept (reflectance units)


@dataclass
class IndexImage:
    values: np.ndarray            # (H,W)
    kind: str                     # ndwi | hot


def ndwi(green: np.ndarray, nir: np.ndarray) -> IndexImage:
    """(green - nir) / (green + nir); 0 where the denominator is 0."""
    g = np.asarray(green, dtype=np.float64)
    n = np.asarray(nir, dtype=np.float64)
    if g.shape != n.shape:
        raise ValueError(f"ndwi: shapes {g.shape} and {n.shape} differ")
    denom = g + n
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, (g - n) / np.where(denom > 0, denom, 1.0), 0.0)
    return IndexImage(out, "ndwi")


def fit_clear_sky_line(blue: np.ndarray, red: np.ndarray) -> ClearSkyLine:
    """Least-squares blue/red line from the least-hazy pixels.

    Takes the 0.15% of pixels with the lowest blue reflectance, bins them
    into 20 equal-width blue bins, keeps the 20 highest-red pixels per
    bin (all of them when a bin is smaller), and fits a line to the
    retained points.
    """
    b = np.asarray(blue, dtype=np.float64).reshape(-1)
    r = np.asarray(red, dtype=np.float64).reshape(-1)
    if b.shape != r.shape:
        raise ValueError(f"clear-sky fit: shapes {blue.shape} and {red.shape} differ")
    n_cand = max(2, math.ceil(CANDIDATE_FRACTION * b.size))
    order = np.argsort(b, kind="stable")[:n_cand]
    cb, cr = b[order], r[order]
    lo, hi = cb.min(), cb.max()
    if hi <= lo:
        raise ValueError("clear-sky fit degenerate: constant blue band")
    edges = np.linspace(lo, hi, N_BINS + 1)
    which = np.clip(np.digitize(cb, edges[1:-1]), 0, N_BINS - 1)
    keep_b, keep_r = [], []
    for k in range(N_BINS):
        sel = which == k
        if not sel.any():
            continue
        bb, rr = cb[sel], cr[sel]
        if bb.size > PIXELS_PER_BIN:
            top = np.argsort(rr, kind="stable")[-PIXELS_PER_BIN:]
            bb, rr = bb[top], rr[top]
        keep_b.append(bb)
        keep_r.append(rr)
    xb = np.concatenate(keep_b)
    yr = np.concatenate(keep_r)
    if np.unique(xb).size < 2:
        raise ValueError("clear-sky fit degenerate: fewer than 2 distinct "
                         "blue values among retained points")
    m, c = np.polyfit(xb, yr, 1)
    return ClearSkyLine(float(m), float(c))


def hot(blue: np.ndarray, red: np.ndarray, line: ClearSkyLine) -> IndexImage:
    """|m*blue - red| + b/sqrt(1 + m^2) per pixel."""
    b = np.asarray(blue, dtype=np.float64)
    r = np.asarray(red, dtype=np.float64)
    if b.shape != r.shape:
        raise ValueError(f"hot: shapes {b.shape} and {r.shape} differ")
    offset = line.b / math.sqrt(1.0 + line.m ** 2)
    return IndexImage(np.abs(line.m * b - r) + offset, "hot")


def otsu_threshold(img: IndexImage, bins: int = 256) -> Tuple[float, np.ndarray]:
    """Histogram threshold maximizing between-class variance.

    Candidates are the ``bins`` histogram bin edges (lower edges); ties go
    to the lowest threshold.  Returns (threshold, values > threshold).
    """
    v = np.asarray(img.values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("otsu on non-finite values")
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise ValueError("otsu undefined for a constant image")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / v.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    omega = np.cumsum(p)                      # class-0 mass up to each edge
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        sigma_b = (mu_total * omega - mu) ** 2 / (omega * (1.0 - omega))
    sigma_b[~np.isfinite(sigma_b)] = -1.0
    # ties (including plateaus across empty bins, where the variance is
    # mathematically constant) resolve to the lowest threshold
    smax = float(sigma_b.max())
    k = int(np.argmax(sigma_b >= smax - 1e-10 * max(abs(smax), 1e-300)))
    threshold = float(edges[k + 1])
    mask = np.asarray(img.values) > threshold
    return threshold, mask


def generate_mask(cube: DataCube, task: str) -> np.ndarray:
    """Binary proxy mask: NDWI+Otsu for water, HOT+Otsu for cloud."""
    if task == "water":
        green = band_image(cube, 0.60)
        nir = band_image(cube, 0.87)
        _, mask = otsu_threshold(ndwi(green, nir))
        return mask.astype(np.int64)
    if task == "cloud":
        blue = band_image(cube, 0.49)
        red = band_image(cube, 0.66)
        line = fit_clear_sky_line(blue, red)
        _, mask = otsu_threshold(hot(blue, red, line))
        return mask.astype(np.int64)
    raise ValueError(f"unknown labelling task '{task}'")
