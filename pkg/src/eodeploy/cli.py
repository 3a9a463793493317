"""Command-line entry point.

Every subcommand writes its outputs under a run directory together with a
manifest recording the command, input hashes, the effective config hash,
and the seed.  Config files are INI-style ``key = value`` sections; any
value can be overridden on the command line with ``--set section.key=v``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import bundle as bundle_mod
from . import datacube, experiment, finetune, fixtures, formats, heads
from . import labelling, mae, metrics, vit
from .rng import stream
from .tensor import NonFiniteError, TensorError

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "encoder": {"bands": "4", "temporal": "1", "patch": "1,8,8", "dim": "64",
                "depth": "4", "heads": "4", "mlp_ratio": "4", "dropout": "0.0"},
    "student": {"dim": "16"},
    "head": {"kind": "unet-decoder", "classes": "2", "hidden": "256",
             "width": "64", "dropout": "0.1", "ppm_scales": "1,2,3,6"},
    "loss": {"kind": "weighted-cross-entropy", "weights": "1,1", "ignore": "-1"},
    "train": {"epochs": "60", "batch_size": "8", "base_lr": "1e-3",
              "warmup_fraction": "0.1", "seed": "0", "patience": "10"},
    "distill": {"steps": "200", "batch_size": "8", "base_lr": "1e-3",
                "warmup_fraction": "0.1", "student_mask_ratio": "0.75",
                "teacher_mask_ratio": "0.0", "seed": "0"},
    "experiment": {"fractions": "1.0,0.5,0.25", "seeds": "5",
                   "metric": "mIoU", "epochs": "20"},
}


def load_config(path: Optional[str], overrides: List[str]) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        cfg.read(path)
    for item in overrides:
        key, _, value = item.partition("=")
        section, _, name = key.partition(".")
        if not (section and name and _):
            raise UsageError(f"--set expects section.key=value, got '{item}'")
        if not cfg.has_section(section):
            cfg.add_section(section)
        cfg.set(section, name, value)
    return cfg


def config_hash(cfg: configparser.ConfigParser) -> str:
    h = hashlib.sha256()
    for section in sorted(cfg.sections()):
        for key in sorted(cfg[section]):
            h.update(f"{section}.{key}={cfg[section][key]}\n".encode())
    return h.hexdigest()[:16]


def _ints(s: str):
    return tuple(int(v) for v in s.split(","))


def _floats(s: str):
    return tuple(float(v) for v in s.split(","))


def encoder_config(cfg, section: str = "encoder") -> vit.EncoderConfig:
    enc = dict(cfg["encoder"])
    enc.update(cfg[section] if cfg.has_section(section) else {})
    return vit.EncoderConfig(
        bands=int(enc["bands"]), temporal=int(enc["temporal"]),
        patch=_ints(enc["patch"]), dim=int(enc["dim"]),
        depth=int(enc["depth"]), heads=int(enc["heads"]),
        mlp_ratio=int(enc["mlp_ratio"]), dropout=float(enc["dropout"]))


def head_spec(cfg) -> heads.HeadSpec:
    h = cfg["head"]
    return heads.HeadSpec(kind=h["kind"], classes=int(h["classes"]),
                          hidden=int(h["hidden"]), width=int(h["width"]),
                          dropout=float(h["dropout"]),
                          ppm_scales=_ints(h["ppm_scales"]))


def loss_spec(cfg) -> heads.LossSpec:
    l = cfg["loss"]
    return heads.LossSpec(kind=l["kind"], class_weights=_floats(l["weights"]),
                          ignore=int(l["ignore"]))


def train_config(cfg) -> finetune.TrainConfig:
    t = cfg["train"]
    return finetune.TrainConfig(
        epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
        base_lr=float(t["base_lr"]),
        warmup_fraction=float(t["warmup_fraction"]),
        seed=int(t["seed"]), patience=int(t["patience"]))


def distill_config(cfg) -> mae.DistillConfig:
    d = cfg["distill"]
    return mae.DistillConfig(
        steps=int(d["steps"]), batch_size=int(d["batch_size"]),
        base_lr=float(d["base_lr"]),
        warmup_fraction=float(d["warmup_fraction"]),
        student_mask_ratio=float(d["student_mask_ratio"]),
        teacher_mask_ratio=float(d["teacher_mask_ratio"]),
        seed=int(d["seed"]))


# ---------------------------------------------------------------------------
# run directory

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def start_run(args, cfg, inputs: List[str]) -> Path:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg["train"]["seed"] if cfg.has_section("train") else "0"
    lines = [f"command={' '.join(sys.argv[1:])}",
             f"config_hash={config_hash(cfg)}",
             f"seed={seed}",
             f"started={time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    for src in inputs:
        p = Path(src)
        digest = _sha256(p) if p.is_file() else "missing"
        lines.append(f"input={src} sha256={digest}")
    (run_dir / "run-manifest.txt").write_text("\n".join(lines) + "\n",
                                              encoding="utf-8")
    return run_dir


# ---------------------------------------------------------------------------
# record IO

def load_records(manifest_path: str) -> List[datacube.TileRecord]:
    """Tile records from a tab-separated manifest of cube/mask paths."""
    base = Path(manifest_path).parent
    records = []
    for tile_p, mask_p, label, ratio, product in datacube.read_manifest(manifest_path):
        data, _ = formats.read_eocube((base / tile_p).read_bytes())
        rec = datacube.TileRecord(
            data, product_id=product,
            tile_label=int(label) if label else None,
            cloud_ratio=float(ratio) if ratio else None)
        if mask_p:
            rec.mask = formats.read_eomask((base / mask_p).read_bytes())
            if rec.cloud_ratio is None:
                rec.cloud_ratio = float((rec.mask > 0).mean())
        records.append(rec)
    if not records:
        raise ValueError(f"manifest {manifest_path} holds no records")
    return records


def _split_records(records, val_fraction: float, seed: int):
    rng = stream(seed, "cli/val-split")
    order = rng.permutation(len(records))
    n_val = max(1, int(round(val_fraction * len(records))))
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args, cfg):
    run_dir = start_run(args, cfg, [args.input])
    cube = datacube.ingest_cube(args.input, mode=args.mode)
    out = run_dir / (args.out or "normalized.eocube")
    out.write_bytes(formats.write_eocube(cube.data, cube.wavelengths))
    print(f"ingested {args.input} -> {out} "
          f"(shape {'x'.join(map(str, cube.data.shape))})")


def cmd_label(args, cfg):
    run_dir = start_run(args, cfg, [args.input])
    cube = datacube.ingest_cube(args.input, mode=args.mode)
    mask = labelling.generate_mask(cube, args.task)
    out = run_dir / (args.out or f"{args.task}.eomask")
    out.write_bytes(formats.write_eomask(mask))
    print(f"labelled {args.input} task={args.task} positives="
          f"{(mask > 0).mean():.4f} -> {out}")


def cmd_pretrain_distill(args, cfg):
    cube_paths = sorted(Path(args.cubes).glob("*.eocube"))
    if not cube_paths:
        raise ValueError(f"no .eocube files under {args.cubes}")
    run_dir = start_run(args, cfg, [str(p) for p in cube_paths])
    volumes = []
    for p in cube_paths:
        data, _ = formats.read_eocube(p.read_bytes())
        volumes.append(data)
    cubes = np.stack(volumes)
    teacher_cfg = encoder_config(cfg, "encoder")
    student_cfg = encoder_config(cfg, "student")
    dcfg = distill_config(cfg)
    rng = stream(dcfg.seed, "cli/pretrain")
    teacher_params = mae.init_mae_params(teacher_cfg, rng)
    student_params = mae.init_mae_params(student_cfg, rng)
    result = mae.train_distill(teacher_cfg, teacher_params, student_cfg,
                               student_params, cubes, dcfg, target=args.target)
    (run_dir / "distill-history.csv").write_text(
        mae.history_csv(result.history), encoding="utf-8")
    student_bundle = bundle_mod.ModelBundle(student_cfg, result.encoder_params)
    bundle_mod.save_bundle(student_bundle, run_dir / "student.eofm")
    first, last = mae.smoothed_endpoints(result.history)
    print(f"distilled {dcfg.steps} steps over {len(cubes)} cubes: "
          f"smoothed loss {first:.6f} -> {last:.6f}")


def cmd_finetune(args, cfg):
    run_dir = start_run(args, cfg, [args.encoder, args.train_manifest])
    enc_bundle = bundle_mod.load_bundle(args.encoder)
    records = load_records(args.train_manifest)
    if args.val_manifest:
        train, val = records, load_records(args.val_manifest)
    else:
        train, val = _split_records(records, 0.2, int(cfg["train"]["seed"]))
    spec = head_spec(cfg)
    enc_cfg = enc_bundle.encoder_cfg
    grid_hw = enc_cfg.grid(*train[0].tile.shape[-2:])[1]
    rng = stream(int(cfg["train"]["seed"]), "cli/head-init")
    hp, hs = heads.init_head_params(spec, enc_cfg, rng, grid_hw=grid_hw)
    result = finetune.finetune(enc_cfg, enc_bundle.encoder_params, spec, hp,
                               hs, train, val, train_config(cfg),
                               loss_spec(cfg))
    (run_dir / "train-history.csv").write_text(
        finetune.history_csv(result.history), encoding="utf-8")
    out_bundle = bundle_mod.ModelBundle(enc_cfg, enc_bundle.encoder_params,
                                        spec, result.head_params,
                                        result.head_state)
    bundle_mod.save_bundle(out_bundle, run_dir / "model.eofm")
    print(f"fine-tuned {spec.kind}: best epoch {result.best_epoch}, "
          f"val loss {result.history[result.best_epoch][2]:.6f}")


def cmd_infer(args, cfg):
    run_dir = start_run(args, cfg, [args.bundle, args.input])
    b = bundle_mod.load_bundle(args.bundle)
    data, _ = formats.read_eocube(Path(args.input).read_bytes())
    pred = bundle_mod.predict_tiles(b, [data])[0]
    out = run_dir / (args.out or "prediction.eomask")
    if b.head_spec.kind == "upernet-regressor":
        out = out.with_suffix(".eocube")
        out.write_bytes(formats.write_eocube(
            np.asarray(pred, dtype=np.float32)[None, None]))
    elif b.head_spec.kind == "mlp-classifier":
        out = out.with_suffix(".txt")
        out.write_text(f"{pred}\n", encoding="utf-8")
    else:
        out.write_bytes(formats.write_eomask(np.asarray(pred)))
    print(f"inference ({b.precision}) -> {out}")


def cmd_quantize(args, cfg):
    run_dir = start_run(args, cfg, [args.input])
    b = bundle_mod.load_bundle(args.input)
    q = bundle_mod.quantize_fp16(b)
    out = Path(args.out) if args.out else run_dir / "model-fp16.eofm"
    buf = bundle_mod.save_bundle(q, out)
    ratio = len(buf) / Path(args.input).stat().st_size
    print(f"quantized {args.input} -> {out} ({ratio:.3f}x the FP32 size)")


def _eval_bundle(b, records) -> metrics.MetricReport:
    return experiment.evaluate_records(b.encoder_cfg, b.encoder_params,
                                       b.head_spec, b.head_params,
                                       b.head_state, records)


def _metrics_csv(report: metrics.MetricReport) -> str:
    lines = ["metric,value"]
    lines += [f"{k},{v:.4f}" for k, v in report.values.items()]
    return "\n".join(lines) + "\n"


def cmd_eval(args, cfg):
    run_dir = start_run(args, cfg, [args.bundle, args.manifest])
    b = bundle_mod.load_bundle(args.bundle)
    records = load_records(args.manifest)
    report = _eval_bundle(b, records)
    out = run_dir / (args.out or "metrics.csv")
    out.write_text(_metrics_csv(report), encoding="utf-8")
    summary = " ".join(f"{k}={v:.2f}" for k, v in report.values.items())
    print(f"evaluated {len(records)} records: {summary}")


def cmd_profile(args, cfg):
    run_dir = start_run(args, cfg, [args.bundle, args.manifest])
    b = bundle_mod.load_bundle(args.bundle)
    records = load_records(args.manifest)
    report = bundle_mod.profile(b, [r.tile for r in records])
    out = run_dir / (args.out or "profile.csv")
    out.write_text(report.csv(), encoding="utf-8")
    print(f"profiled {report.n_tiles} tiles: {report.mean_tile_ms:.2f} ms/tile, "
          f"peak RSS {report.peak_rss_mb:.1f} MB")


def cmd_report(args, cfg):
    run_dir = start_run(args, cfg, [args.fp32, args.fp16])
    def read_metrics(path):
        values = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
            if line.strip():
                name, _, v = line.partition(",")
                values[name] = float(v)
        return values
    rep = bundle_mod.equivalence_report(read_metrics(args.fp32),
                                        read_metrics(args.fp16),
                                        tolerance_pp=args.tolerance)
    out = run_dir / (args.out or "parity.csv")
    out.write_text(rep.csv(), encoding="utf-8")
    verdict = "within" if rep.within_tolerance else "OUTSIDE"
    print(f"parity report -> {out} ({verdict} {args.tolerance} pp)")


def cmd_experiment(args, cfg):
    run_dir = start_run(args, cfg, [])
    e = cfg["experiment"]
    fractions = _floats(args.fractions or e["fractions"])
    n_seeds = int(args.seeds or e["seeds"])
    enc_cfg = encoder_config(cfg, "student")
    spec = head_spec(cfg)
    records = fixtures.water_records(args.n_records, seed=7,
                                     size=args.tile_size)
    n = len(records)
    train = records[:int(0.6 * n)]
    val = records[int(0.6 * n):int(0.8 * n)]
    test = records[int(0.8 * n):]
    tcfg = train_config(cfg)
    tcfg.epochs = int(e["epochs"])
    ecfg = experiment.ExperimentConfig(
        fractions=fractions, seeds=tuple(range(n_seeds)), train=tcfg,
        metric=e["metric"])
    pre_enc = pre_head = pre_state = None
    if args.pretrained:
        pb = bundle_mod.load_bundle(args.pretrained)
        enc_cfg, pre_enc = pb.encoder_cfg, pb.encoder_params
        if pb.head_params:
            pre_head, pre_state = pb.head_params, pb.head_state
    else:
        teacher_cfg = encoder_config(cfg, "encoder")
        dcfg = distill_config(cfg)
        rng = stream(dcfg.seed, "cli/experiment-pretrain")
        cubes = np.stack([r.tile for r in train])
        res = mae.train_distill(teacher_cfg,
                                mae.init_mae_params(teacher_cfg, rng),
                                enc_cfg, mae.init_mae_params(enc_cfg, rng),
                                cubes, dcfg)
        pre_enc = res.encoder_params
        grid_hw = enc_cfg.grid(args.tile_size, args.tile_size)[1]
        hp, hs = heads.init_head_params(spec, enc_cfg,
                                        stream(dcfg.seed, "cli/pre-head"),
                                        grid_hw=grid_hw)
        fin = finetune.finetune(enc_cfg, pre_enc, spec, hp, hs, train, val,
                                tcfg, loss_spec(cfg))
        pre_head, pre_state = fin.head_params, fin.head_state
    result = experiment.run_data_efficiency_experiment(
        enc_cfg, spec, loss_spec(cfg), train, val, test, ecfg,
        pretrained_encoder=pre_enc, pretrained_head=pre_head,
        pretrained_state=pre_state)
    out = run_dir / "grid.csv"
    out.write_text(result.csv(), encoding="utf-8")
    print(result.csv(), end="")
    print(f"grid -> {out}")


def cmd_fixtures(args, cfg):
    run_dir = start_run(args, cfg, [])
    cubes = fixtures.textured_cubes(args.n, size=args.tile_size,
                                    seed=args.seed)
    cube_dir = run_dir / "textured"
    cube_dir.mkdir(exist_ok=True)
    for i, c in enumerate(cubes):
        (cube_dir / f"textured-{i:03d}.eocube").write_bytes(
            formats.write_eocube(c))
    rows = []
    tile_dir = run_dir / "water"
    tile_dir.mkdir(exist_ok=True)
    for i, rec in enumerate(fixtures.water_records(args.n, seed=args.seed,
                                                   size=args.tile_size)):
        tp, mp = f"tile-{i:03d}.eocube", f"tile-{i:03d}.eomask"
        (tile_dir / tp).write_bytes(formats.write_eocube(
            rec.tile, np.array([0.49, 0.60, 0.66, 0.87])))
        (tile_dir / mp).write_bytes(formats.write_eomask(rec.mask))
        rows.append((tp, mp, str(rec.tile_label), f"{rec.cloud_ratio:.6f}",
                     rec.product_id))
    datacube.write_manifest(tile_dir / "manifest.tsv", rows)
    if args.geometry:
        raw = fixtures.geometry_raw(seed=args.seed)
        (run_dir / "geometry.eocube").write_bytes(formats.write_eocube(
            raw, np.array([0.49, 0.60, 0.66, 0.87])))
    print(f"fixtures -> {run_dir} ({args.n} textured cubes, "
          f"{args.n} water tiles{', geometry cube' if args.geometry else ''})")


# ---------------------------------------------------------------------------
# parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eodeploy", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="S.K=V",
                   help="override a config value")
    p.add_argument("--run-dir", default="run", help="output directory")
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("ingest", help="normalize a raw cube")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")
    sp.add_argument("--mode", default="per-band-minmax",
                    choices=["per-band-minmax", "fixed-scale"])

    sp = sub.add_parser("label", help="auto-label water or cloud")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--task", required=True, choices=["water", "cloud"])
    sp.add_argument("--out")
    sp.add_argument("--mode", default="per-band-minmax",
                    choices=["per-band-minmax", "fixed-scale"])

    sp = sub.add_parser("pretrain-distill", help="dual-MAE distillation")
    sp.add_argument("--cubes", required=True, help="directory of .eocube files")
    sp.add_argument("--target", default="teacher", choices=["teacher", "pixels"])

    sp = sub.add_parser("finetune", help="train a task head")
    sp.add_argument("--encoder", required=True, help="pretrained .eofm")
    sp.add_argument("--train-manifest", required=True)
    sp.add_argument("--val-manifest")

    sp = sub.add_parser("infer", help="run a bundle on one tile")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")

    sp = sub.add_parser("quantize", help="FP32 -> FP16 bundle")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")

    sp = sub.add_parser("eval", help="metrics over a manifest")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")

    sp = sub.add_parser("profile", help="latency and memory profile")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out")

    sp = sub.add_parser("report", help="FP32/FP16 parity report")
    sp.add_argument("--fp32", required=True, help="FP32 metrics CSV")
    sp.add_argument("--fp16", required=True, help="FP16 metrics CSV")
    sp.add_argument("--tolerance", type=float, default=0.25)
    sp.add_argument("--out")

    sp = sub.add_parser("experiment", help="label-efficiency grid")
    sp.add_argument("--fractions")
    sp.add_argument("--seeds")
    sp.add_argument("--pretrained", help=".eofm with encoder (and head)")
    sp.add_argument("--n-records", type=int, default=50)
    sp.add_argument("--tile-size", type=int, default=32)

    sp = sub.add_parser("fixtures", help="generate synthetic datasets")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--tile-size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--geometry", action="store_true",
                    help="also write the full-size geometry cube")
    return p


COMMANDS = {
    "ingest": cmd_ingest, "label": cmd_label,
    "pretrain-distill": cmd_pretrain_distill, "finetune": cmd_finetune,
    "infer": cmd_infer, "quantize": cmd_quantize, "eval": cmd_eval,
    "profile": cmd_profile, "report": cmd_report,
    "experiment": cmd_experiment, "fixtures": cmd_fixtures,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return USAGE_ERROR
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](args, cfg)
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (NonFiniteError, TensorError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return NUMERIC_ERROR
    except (formats.FormatError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
