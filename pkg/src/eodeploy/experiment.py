"""Experiment harnesses: label-efficiency grids over initialization arms
and the distilled-versus-pixel-target pretraining comparison."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import finetune as ft
from . import heads, mae, metrics, vit
from .datacube import TileRecord, subsample_labels
from .rng import stream
from .tensor import Tensor

ARMS = ("random-random", "geofm-random", "geofm-pretrained")


@dataclass
class ExperimentConfig:
    arms: Tuple[str, ...] = ARMS
    fractions: Tuple[float, ...] = (1.0, 0.5, 0.25)
    seeds: Tuple[int, ...] = (0, 1, 2)
    train: ft.TrainConfig = field(default_factory=ft.TrainConfig)
    metric: str = "mIoU"

    def __post_init__(self):
        unknown = set(self.arms) - set(ARMS)
        if unknown:
            raise ValueError(f"unknown experiment arms {sorted(unknown)}")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            raise ValueError("fractions must lie in (0,1]")
        if not self.seeds:
            raise ValueError("at least one seed required")


@dataclass
class Cell:
    arm: str
    fraction: float
    values: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


@dataclass
class ExperimentResult:
    metric: str
    cells: List[Cell]

    def cell(self, arm: str, fraction: float) -> Cell:
        for c in self.cells:
            if c.arm == arm and c.fraction == fraction:
                return c
        raise KeyError(f"no cell for ({arm}, {fraction})")

    def csv(self) -> str:
        lines = [f"arm,fraction,mean_{self.metric},std_{self.metric},n_seeds"]
        lines += [f"{c.arm},{c.fraction},{c.mean:.4f},{c.std:.4f},{len(c.values)}"
                  for c in self.cells]
        return "\n".join(lines) + "\n"


def evaluate_records(enc_cfg: vit.EncoderConfig, enc_params: Dict[str, Tensor],
                     head_spec: heads.HeadSpec, head_params: Dict[str, Tensor],
                     head_state: Dict[str, np.ndarray],
                     records: Sequence[TileRecord],
                     batch_size: int = 16) -> metrics.MetricReport:
    """Task metrics over a record list in inference mode."""
    out_size = records[0].tile.shape[-2:]
    cm: Optional[metrics.ConfusionMatrix] = None
    preds, targets = [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        tiles = Tensor(np.stack([r.tile for r in chunk]).astype(np.float32))
        enc_out = vit.encode(tiles, enc_cfg, enc_params)
        logits = heads.head_forward(head_spec, enc_out, head_params,
                                    head_state, out_size=out_size, train=False)
        if head_spec.kind == "upernet-regressor":
            preds.extend(np.asarray(logits.data[:, 0]))
            targets.extend(r.mask for r in chunk)
            continue
        pred = heads.predict_label(logits)
        if head_spec.kind == "mlp-classifier":
            truth = np.asarray([r.tile_label for r in chunk])
        else:
            truth = np.stack([r.mask for r in chunk])
        part = metrics.accumulate_confusion(pred, truth, head_spec.classes)
        cm = part if cm is None else metrics.merge_confusion(cm, part)
    if head_spec.kind == "upernet-regressor":
        return metrics.MetricReport("regression",
                                    {"RMSE": metrics.rmse_metric(preds, targets)})
    if head_spec.kind == "mlp-classifier":
        return metrics.classification_metrics(cm)
    return metrics.segmentation_metrics(cm)


def _run_cell(arm: str, enc_cfg, head_spec, loss_spec, train_records,
              val_records, test_records, train_cfg: ft.TrainConfig, seed: int,
              metric: str, pretrained_encoder, pretrained_head,
              pretrained_state) -> float:
    rng = stream(seed, f"experiment/{arm}")
    if arm == "random-random":
        enc_params = vit.init_encoder_params(enc_cfg, rng)
    else:
        if pretrained_encoder is None:
            raise ValueError(f"arm '{arm}' needs pretrained encoder weights")
        enc_params = pretrained_encoder
    grid_hw = enc_cfg.grid(*train_records[0].tile.shape[-2:])[1]
    if arm == "geofm-pretrained":
        if pretrained_head is None:
            raise ValueError("arm 'geofm-pretrained' needs pretrained head weights")
        head_params = dict(pretrained_head)
        head_state = dict(pretrained_state or {})
    else:
        head_params, head_state = heads.init_head_params(
            head_spec, enc_cfg, rng, grid_hw=grid_hw)
    cfg = replace(train_cfg, seed=seed)
    res = ft.finetune(enc_cfg, enc_params, head_spec, head_params, head_state,
                      train_records, val_records, cfg, loss_spec,
                      train_encoder=(arm == "random-random"))
    enc_final = res.encoder_params if res.encoder_params is not None else enc_params
    report = evaluate_records(enc_cfg, enc_final, head_spec, res.head_params,
                              res.head_state, test_records)
    if metric not in report.values:
        raise ValueError(f"metric '{metric}' not produced by "
                         f"{head_spec.kind} (have {sorted(report.values)})")
    return report.values[metric]


def run_data_efficiency_experiment(
        enc_cfg: vit.EncoderConfig, head_spec: heads.HeadSpec,
        loss_spec: heads.LossSpec, train_records: Sequence[TileRecord],
        val_records: Sequence[TileRecord], test_records: Sequence[TileRecord],
        cfg: ExperimentConfig,
        pretrained_encoder: Optional[Dict[str, Tensor]] = None,
        pretrained_head: Optional[Dict[str, Tensor]] = None,
        pretrained_state: Optional[Dict[str, np.ndarray]] = None
) -> ExperimentResult:
    """Arms x label-fractions x seeds grid of a downstream metric.

    Label subsets are nested per seed: every 25% subset is contained in
    the matching 50% subset, so fraction curves are monotone in data.
    """
    cells = []
    for arm in cfg.arms:
        for fraction in cfg.fractions:
            values = []
            for seed in cfg.seeds:
                subset = subsample_labels(train_records, fraction, seed)
                values.append(_run_cell(
                    arm, enc_cfg, head_spec, loss_spec, subset, val_records,
                    test_records, cfg.train, seed, cfg.metric,
                    pretrained_encoder, pretrained_head, pretrained_state))
            cells.append(Cell(arm, fraction, values))
    return ExperimentResult(cfg.metric, cells)


@dataclass
class PretrainComparison:
    distilled: metrics.MetricReport
    pixel: metrics.MetricReport
    distill_history: List[Tuple[int, float, float]]
    pixel_history: List[Tuple[int, float, float]]


def compare_pretraining(teacher_cfg: vit.EncoderConfig,
                        teacher_params: Dict[str, Tensor],
                        student_cfg: vit.EncoderConfig,
                        cubes: np.ndarray, distill_cfg: mae.DistillConfig,
                        head_spec: heads.HeadSpec, loss_spec: heads.LossSpec,
                        train_records: Sequence[TileRecord],
                        val_records: Sequence[TileRecord],
                        test_records: Sequence[TileRecord],
                        train_cfg: ft.TrainConfig) -> PretrainComparison:
    """Distillation-pretrained student versus a pixel-target student.

    Both students start from identical weights and see identical batches;
    only the reconstruction target differs.  Each is then fine-tuned and
    scored on the same downstream split.
    """
    init_rng = stream(distill_cfg.seed, "compare/student-init")
    student_init = mae.init_mae_params(student_cfg, init_rng)
    reports, histories = [], []
    for target in ("teacher", "pixels"):
        res = mae.train_distill(teacher_cfg, teacher_params, student_cfg,
                                dict(student_init), cubes, distill_cfg,
                                target=target)
        grid_hw = student_cfg.grid(*train_records[0].tile.shape[-2:])[1]
        rng = stream(train_cfg.seed, f"compare/head/{target}")
        hp, hs = heads.init_head_params(head_spec, student_cfg, rng,
                                        grid_hw=grid_hw)
        fin = ft.finetune(student_cfg, res.encoder_params, head_spec, hp, hs,
                          train_records, val_records, train_cfg, loss_spec)
        reports.append(evaluate_records(student_cfg, res.encoder_params,
                                        head_spec, fin.head_params,
                                        fin.head_state, test_records))
        histories.append(res.history)
    return PretrainComparison(reports[0], reports[1],
                              histories[0], histories[1])
