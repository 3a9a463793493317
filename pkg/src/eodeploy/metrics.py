"""Confusion-matrix metrics, regression RMSE, and the domain-gap report."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray                # (K,K), rows = truth, cols = prediction
    ignored: int = 0

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricReport:
    task: str
    values: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            if name != "RMSE" and not 0.0 <= v <= 100.0:
                raise ValueError(f"metric {name}={v} outside [0,100]")


def accumulate_confusion(preds, targets, k: int,
                         ignore: int = -1) -> ConfusionMatrix:
    p = np.asarray(preds).reshape(-1)
    t = np.asarray(targets).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"prediction/target sizes differ: {p.size} vs {t.size}")
    valid = t != ignore
    ignored = int((~valid).sum())
    p, t = p[valid], t[valid]
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValueError(f"prediction outside 0..{k - 1}")
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"target outside 0..{k - 1}")
    counts = np.bincount(t * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts.astype(np.int64), ignored)


def merge_confusion(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.k != b.k:
        raise ValueError("cannot merge confusion matrices of different sizes")
    return ConfusionMatrix(a.counts + b.counts, a.ignored + b.ignored)


def _binary_cells(cm: ConfusionMatrix):
    tn, fp = int(cm.counts[0, 0]), int(cm.counts[0, 1])
    fn, tp = int(cm.counts[1, 0]), int(cm.counts[1, 1])
    return tp, fp, fn, tn


def _f1(tp: int, fp: int, fn: int) -> float:
    # class absent from both truth and prediction counts as perfect
    if tp + fp + fn == 0:
        return 100.0
    return 100.0 * 2 * tp / (2 * tp + fp + fn)


def _iou(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 100.0
    return 100.0 * tp / (tp + fp + fn)


def _fp_rate(fp: int, tn: int) -> float:
    return 100.0 * fp / (fp + tn) if fp + tn else 0.0


def classification_metrics(cm: ConfusionMatrix) -> MetricReport:
    """Acc, positive-class F1, and false-positive rate FP/(FP+TN)."""
    if cm.k != 2:
        raise ValueError("classification metrics need a 2x2 matrix")
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp, fp, fn, tn = _binary_cells(cm)
    return MetricReport("classification", {
        "Acc": 100.0 * (tp + tn) / cm.total,
        "FP": _fp_rate(fp, tn),
        "F1": _f1(tp, fp, fn),
    })


def segmentation_metrics(cm: ConfusionMatrix) -> MetricReport:
    """Per-class IoU/F1, their unweighted means, OA, and FP rate."""
    if cm.k < 2:
        raise ValueError("segmentation metrics need K >= 2")
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    c = cm.counts
    values: Dict[str, float] = {}
    ious, f1s = [], []
    for k in range(cm.k):
        tp = int(c[k, k])
        fp = int(c[:, k].sum() - tp)
        fn = int(c[k, :].sum() - tp)
        iou, f1 = _iou(tp, fp, fn), _f1(tp, fp, fn)
        values[f"IoU_{k}"] = iou
        values[f"F1_{k}"] = f1
        ious.append(iou)
        f1s.append(f1)
    values["mIoU"] = float(np.mean(ious))
    values["mF1"] = float(np.mean(f1s))
    values["OA"] = 100.0 * float(np.trace(c)) / cm.total
    if cm.k == 2:
        tp, fp, fn, tn = _binary_cells(cm)
        values["FP"] = _fp_rate(fp, tn)
    return MetricReport("segmentation", values)


def rmse_metric(preds: Sequence[np.ndarray],
                targets: Sequence[np.ndarray]) -> float:
    """Per-image masked RMSE (zero targets excluded), averaged over images."""
    per_image = []
    for p, t in zip(preds, targets):
        p = np.asarray(p, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        m = t != 0
        if not m.any():
            continue
        per_image.append(float(np.sqrt(((p[m] - t[m]) ** 2).mean())))
    if not per_image:
        raise ValueError("no image with a nonzero target")
    return float(np.mean(per_image))


# metrics where an increase is an improvement; FP rate and RMSE degrade upward
BENEFIT_METRICS = {"Acc", "F1", "mIoU", "mF1", "OA"}


def domain_gap_report(source: MetricReport,
                      target: MetricReport) -> List[Tuple[str, float, float, float]]:
    """(metric, source, target, target - source) rows.

    For benefit metrics a negative delta is degradation; for FP-style
    metrics a positive delta is degradation.
    """
    if source.task != target.task or set(source.values) != set(target.values):
        raise ValueError("domain gap needs matching task and metric sets")
    return [(name, source.values[name], target.values[name],
             target.values[name] - source.values[name])
            for name in source.values]


def report_csv(rows: Sequence[Tuple[str, float, float, float]]) -> str:
    lines = ["metric,source,target,delta"]
    lines += [f"{m},{s:.4f},{t:.4f},{d:+.4f}" for m, s, t, d in rows]
    return "\n".join(lines) + "\n"
