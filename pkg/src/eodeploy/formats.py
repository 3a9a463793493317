"""Bit-exact binary file formats for cubes and masks.

.eocube : magic "EOC1", little-endian u32 C,T,H,W, u8 dtype code
          (0 = FP32), u8 wavelength-table flag, optional C little-endian
          FP32 wavelengths in micrometres, payload FP32 in [C][T][H][W]
          row-major order.
.eomask : magic "EOM1", u32 H,W, payload little-endian i16 row-major
          (-1 = missing, 0/1 = classes, larger values allowed).
"""

from __future__ import annotations

import struct
from typing import Optional, Tuple

import numpy as np

EOCUBE_MAGIC = b"EOC1"
EOMASK_MAGIC = b"EOM1"


class FormatError(ValueError):
    """Corrupt or truncated file; the message carries the byte offset."""


def _need(buf: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(buf):
        raise FormatError(f"short payload reading {what} at byte offset {offset}: "
                          f"need {count} bytes, have {len(buf) - offset}")
    return buf[offset:offset + count]


def write_eocube(data: np.ndarray, wavelengths: Optional[np.ndarray] = None) -> bytes:
    """Serialize a (C,T,H,W) FP32 volume."""
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 4:
        raise FormatError(f"cube must be (C,T,H,W), got shape {arr.shape}")
    c, t, h, w = arr.shape
    out = [EOCUBE_MAGIC, struct.pack("<4I", c, t, h, w),
           struct.pack("<BB", 0, 1 if wavelengths is not None else 0)]
    if wavelengths is not None:
        wl = np.ascontiguousarray(wavelengths, dtype="<f4")
        if wl.shape != (c,):
            raise FormatError(f"need {c} wavelengths, got shape {wl.shape}")
        out.append(wl.tobytes())
    out.append(arr.tobytes())
    return b"".join(out)


def read_eocube(buf: bytes) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    off = 0
    magic = _need(buf, off, 4, "magic")
    if magic != EOCUBE_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0")
    off += 4
    c, t, h, w = struct.unpack("<4I", _need(buf, off, 16, "dimensions"))
    off += 16
    dtype_code, wl_flag = struct.unpack("<BB", _need(buf, off, 2, "header flags"))
    off += 2
    if dtype_code != 0:
        raise FormatError(f"unknown dtype code {dtype_code} at byte offset {off - 2}")
    wavelengths = None
    if wl_flag:
        raw = _need(buf, off, 4 * c, "wavelength table")
        wavelengths = np.frombuffer(raw, dtype="<f4").copy()
        off += 4 * c
    n = c * t * h * w
    raw = _need(buf, off, 4 * n, "cube payload")
    data = np.frombuffer(raw, dtype="<f4").reshape(c, t, h, w).copy()
    off += 4 * n
    if off != len(buf):
        raise FormatError(f"trailing garbage at byte offset {off}")
    return data, wavelengths


def write_eomask(mask: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(mask, dtype="<i2")
    if arr.ndim != 2:
        raise FormatError(f"mask must be 2D, got shape {arr.shape}")
    h, w = arr.shape
    return EOMASK_MAGIC + struct.pack("<2I", h, w) + arr.tobytes()


def read_eomask(buf: bytes) -> np.ndarray:
    off = 0
    magic = _need(buf, off, 4, "magic")
    if magic != EOMASK_MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0")
    off += 4
    h, w = struct.unpack("<2I", _need(buf, off, 8, "dimensions"))
    off += 8
    raw = _need(buf, off, 2 * h * w, "mask payload")
    mask = np.frombuffer(raw, dtype="<i2").reshape(h, w).astype(np.int64)
    off += 2 * h * w
    if off != len(buf):
        raise FormatError(f"trailing garbage at byte offset {off}")
    return mask
