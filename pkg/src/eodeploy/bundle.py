"""Model bundles: serialization, FP16 quantization, deterministic
inference, precision-parity reporting, and resource profiling.

.eofm : UTF-8 manifest, blank line, magic "EOW1", raw little-endian blob.
Manifest lines are either ``#key=value`` metadata or tensor rows of the
form ``name|dtype|dim0,dim1,...|offset`` with byte offsets into the blob.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import psutil

from . import heads, vit
from .formats import FormatError
from .tensor import FP16, FP32, Tensor, cast

EOFM_MAGIC = b"EOW1"

_DTYPE_TAG = {FP32: "f4", FP16: "f2", "fp64": "f8"}
_TAG_DTYPE = {"f4": ("<f4", FP32), "f2": ("<f2", FP16), "f8": ("<f8", "fp64")}


@dataclass
class ModelBundle:
    encoder_cfg: vit.EncoderConfig
    encoder_params: Dict[str, Tensor]
    head_spec: Optional[heads.HeadSpec] = None
    head_params: Dict[str, Tensor] = field(default_factory=dict)
    head_state: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def precision(self) -> str:
        dtypes = {t.dtype for t in self.encoder_params.values()}
        dtypes |= {t.dtype for t in self.head_params.values()}
        return FP16 if dtypes == {FP16} else FP32


def _cfg_metadata(bundle: ModelBundle) -> Dict[str, str]:
    c = bundle.encoder_cfg
    meta = {
        "enc.bands": str(c.bands), "enc.temporal": str(c.temporal),
        "enc.patch": ",".join(map(str, c.patch)),
        "enc.dim": str(c.dim), "enc.depth": str(c.depth),
        "enc.heads": str(c.heads), "enc.mlp_ratio": str(c.mlp_ratio),
        "enc.dropout": repr(c.dropout),
        "enc.tap_layers": ",".join(map(str, c.tap_layers)),
    }
    if bundle.head_spec is not None:
        s = bundle.head_spec
        meta.update({
            "head.kind": s.kind, "head.classes": str(s.classes),
            "head.hidden": str(s.hidden), "head.width": str(s.width),
            "head.dropout": repr(s.dropout),
            "head.ppm_scales": ",".join(map(str, s.ppm_scales)),
        })
    meta.update(bundle.metadata)
    return meta


def _cfg_from_metadata(meta: Dict[str, str]):
    ints = lambda s: tuple(int(v) for v in s.split(","))
    cfg = vit.EncoderConfig(
        bands=int(meta["enc.bands"]), temporal=int(meta["enc.temporal"]),
        patch=ints(meta["enc.patch"]), dim=int(meta["enc.dim"]),
        depth=int(meta["enc.depth"]), heads=int(meta["enc.heads"]),
        mlp_ratio=int(meta["enc.mlp_ratio"]),
        dropout=float(meta["enc.dropout"]),
        tap_layers=ints(meta["enc.tap_layers"]))
    spec = None
    if "head.kind" in meta:
        spec = heads.HeadSpec(
            kind=meta["head.kind"], classes=int(meta["head.classes"]),
            hidden=int(meta["head.hidden"]), width=int(meta["head.width"]),
            dropout=float(meta["head.dropout"]),
            ppm_scales=ints(meta["head.ppm_scales"]))
    extra = {k: v for k, v in meta.items()
             if not k.startswith(("enc.", "head."))}
    return cfg, spec, extra


def _tensor_rows(bundle: ModelBundle):
    for name in sorted(bundle.encoder_params):
        yield f"enc/{name}", bundle.encoder_params[name]
    for name in sorted(bundle.head_params):
        yield f"head/{name}", bundle.head_params[name]
    for name in sorted(bundle.head_state):
        yield f"state/{name}", Tensor(bundle.head_state[name], dtype=FP32)


def save_bundle(bundle: ModelBundle, path=None) -> bytes:
    """Serialize to .eofm bytes; also writes ``path`` when given."""
    lines = [f"#{k}={v}" for k, v in sorted(_cfg_metadata(bundle).items())]
    blob_parts: List[bytes] = []
    offset = 0
    for name, t in _tensor_rows(bundle):
        if "|" in name or "\n" in name:
            raise FormatError(f"tensor name {name!r} contains reserved characters")
        tag = _DTYPE_TAG[t.dtype]
        raw = np.ascontiguousarray(t.data, dtype=_TAG_DTYPE[tag][0]).tobytes()
        dims = ",".join(map(str, t.shape))
        lines.append(f"{name}|{tag}|{dims}|{offset}")
        blob_parts.append(raw)
        offset += len(raw)
    buf = ("\n".join(lines) + "\n\n").encode("utf-8") + EOFM_MAGIC \
        + b"".join(blob_parts)
    if path is not None:
        Path(path).write_bytes(buf)
    return buf


def load_bundle(source) -> ModelBundle:
    """Parse an .eofm file (path or bytes) back into a ModelBundle."""
    buf = Path(source).read_bytes() if isinstance(source, (str, Path)) else source
    sep = buf.find(b"\n\n")
    if sep < 0:
        raise FormatError("no manifest/blob separator found")
    try:
        manifest = buf[:sep].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"manifest is not UTF-8: {e}") from None
    body = buf[sep + 2:]
    if body[:4] != EOFM_MAGIC:
        raise FormatError(f"bad magic {body[:4]!r} at byte offset {sep + 2}")
    blob = body[4:]

    meta: Dict[str, str] = {}
    enc_params: Dict[str, Tensor] = {}
    head_params: Dict[str, Tensor] = {}
    head_state: Dict[str, np.ndarray] = {}
    prev_offset = -1
    for ln, line in enumerate(manifest.splitlines(), 1):
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key] = value
            continue
        parts = line.split("|")
        if len(parts) != 4:
            raise FormatError(f"manifest line {ln}: expected 4 fields, got "
                              f"{len(parts)}")
        name, tag, dims, off_s = parts
        if tag not in _TAG_DTYPE:
            raise FormatError(f"manifest line {ln}: unknown dtype tag '{tag}'")
        np_dtype, dtype = _TAG_DTYPE[tag]
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        offset = int(off_s)
        if offset <= prev_offset:
            raise FormatError(f"manifest line {ln}: tensor '{name}' offset "
                              f"{offset} not increasing (previous {prev_offset})")
        prev_offset = offset
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(np_dtype).itemsize
        if offset < 0 or offset + nbytes > len(blob):
            raise FormatError(f"tensor '{name}' overruns the blob: needs bytes "
                              f"{offset}..{offset + nbytes}, blob has {len(blob)}")
        arr = np.frombuffer(blob, dtype=np_dtype, count=int(np.prod(shape, dtype=np.int64)),
                            offset=offset).reshape(shape)
        if name.startswith("enc/"):
            enc_params[name[4:]] = Tensor(arr, dtype=dtype, requires_grad=True)
        elif name.startswith("head/"):
            head_params[name[5:]] = Tensor(arr, dtype=dtype, requires_grad=True)
        elif name.startswith("state/"):
            head_state[name[6:]] = np.asarray(arr, dtype=np.float32).copy()
        else:
            raise FormatError(f"tensor '{name}' outside enc/head/state namespaces")
    cfg, spec, extra = _cfg_from_metadata(meta)
    return ModelBundle(cfg, enc_params, spec, head_params, head_state, extra)


def quantize_fp16(bundle: ModelBundle) -> ModelBundle:
    """Saturating FP16 cast of every weight; idempotent.

    Batch-norm running statistics stay FP32: they are accumulation state,
    not weights.
    """
    return ModelBundle(
        bundle.encoder_cfg,
        {k: cast(t, FP16) for k, t in bundle.encoder_params.items()},
        bundle.head_spec,
        {k: cast(t, FP16) for k, t in bundle.head_params.items()},
        dict(bundle.head_state),
        dict(bundle.metadata, precision=FP16))


# ---------------------------------------------------------------------------
# inference

def run_inference(bundle: ModelBundle, tiles: Sequence[np.ndarray],
                  batch_size: int = 8) -> List[np.ndarray]:
    """Deterministic forward passes: dropout off, batch-norm in eval mode.

    FP16 bundles still accumulate in FP32; only the stored weights are
    half precision.  Returns one logits array per tile.
    """
    if bundle.head_spec is None:
        raise ValueError("bundle has no head to run")
    if not tiles:
        return []
    out_size = tiles[0].shape[-2:]
    outputs: List[np.ndarray] = []
    for start in range(0, len(tiles), batch_size):
        chunk = np.stack([np.asarray(t, dtype=np.float32)
                          for t in tiles[start:start + batch_size]])
        enc_out = vit.encode(Tensor(chunk), bundle.encoder_cfg,
                             bundle.encoder_params)
        logits = heads.head_forward(bundle.head_spec, enc_out,
                                    bundle.head_params, bundle.head_state,
                                    out_size=out_size, train=False)
        outputs.extend(np.asarray(logits.data[i]) for i in range(len(chunk)))
    return outputs


def predict_tiles(bundle: ModelBundle, tiles: Sequence[np.ndarray],
                  batch_size: int = 8) -> List[np.ndarray]:
    """Class predictions (or regression values) per tile."""
    out = []
    for logits in run_inference(bundle, tiles, batch_size):
        if bundle.head_spec.kind == "upernet-regressor":
            out.append(logits[0])
        elif logits.ndim == 3:
            out.append(np.argmax(logits, axis=0))
        else:
            out.append(int(np.argmax(logits)))
    return out


# ---------------------------------------------------------------------------
# FP32/FP16 parity

@dataclass
class ParityReport:
    rows: List[Tuple[str, float, float, float, bool]]  # metric, fp32, fp16, delta, ok
    tolerance_pp: float
    n_tiles: int

    @property
    def within_tolerance(self) -> bool:
        return all(ok for *_, ok in self.rows)

    def csv(self) -> str:
        lines = ["metric,fp32,fp16,delta_pp,within_tolerance"]
        lines += [f"{m},{a:.4f},{b:.4f},{d:+.4f},{str(ok).lower()}"
                  for m, a, b, d, ok in self.rows]
        return "\n".join(lines) + "\n"


def equivalence_report(fp32_metrics: Dict[str, float],
                       fp16_metrics: Dict[str, float],
                       tolerance_pp: float = 0.5,
                       n_tiles: int = 0) -> ParityReport:
    """Per-metric FP32 minus FP16 deltas in percentage points."""
    if set(fp32_metrics) != set(fp16_metrics):
        raise ValueError("parity report needs identical metric sets")
    rows = []
    for name in fp32_metrics:
        a, b = fp32_metrics[name], fp16_metrics[name]
        delta = a - b
        rows.append((name, a, b, delta, abs(delta) <= tolerance_pp))
    return ParityReport(rows, tolerance_pp, n_tiles)


# ---------------------------------------------------------------------------
# resource profiling

@dataclass
class ProfileReport:
    precision: str
    n_tiles: int
    per_tile_ms: List[float]
    total_runtime_s: float
    peak_rss_mb: float

    @property
    def mean_tile_ms(self) -> float:
        return float(np.mean(self.per_tile_ms))

    def csv(self) -> str:
        """One row per precision; power columns stay empty because this
        host exposes no power counters."""
        header = ("precision,inference_time_ms_per_tile,total_runtime_s,"
                  "peak_memory_mb,peak_power_w,avg_power_w,energy_j")
        row = (f"{self.precision},{self.mean_tile_ms:.3f},"
               f"{self.total_runtime_s:.3f},{self.peak_rss_mb:.1f},,,")
        return header + "\n" + row + "\n"


def parse_profile_csv(text: str) -> ProfileReport:
    """Reconstruct the CSV-visible fields of a ProfileReport."""
    lines = [l for l in text.splitlines() if l.strip()]
    if len(lines) != 2:
        raise ValueError("profile CSV must have a header and one data row")
    fields = lines[1].split(",")
    precision, mean_ms, total_s, peak_mb = fields[:4]
    return ProfileReport(precision, 0, [float(mean_ms)], float(total_s),
                         float(peak_mb))


class _RssWatcher:
    """Samples process RSS on a thread at >= 10 Hz."""

    def __init__(self, interval: float = 0.05):
        self.interval = interval
        self.peak = 0
        self._stop = threading.Event()
        self._proc = psutil.Process()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.is_set():
            self.peak = max(self.peak, self._proc.memory_info().rss)
            self._stop.wait(self.interval)

    def __enter__(self):
        self.peak = self._proc.memory_info().rss
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join()
        self.peak = max(self.peak, self._proc.memory_info().rss)
        return False


def profile(bundle: ModelBundle, tiles: Sequence[np.ndarray]) -> ProfileReport:
    """Per-tile wall-clock timing and peak resident memory."""
    with _RssWatcher() as watcher:
        t_start = time.perf_counter()
        per_tile = []
        for tile in tiles:
            t0 = time.perf_counter()
            run_inference(bundle, [tile], batch_size=1)
            per_tile.append(1e3 * (time.perf_counter() - t0))
        total = time.perf_counter() - t_start
    return ProfileReport(bundle.precision, len(tiles), per_tile, total,
                         watcher.peak / 2 ** 20)
