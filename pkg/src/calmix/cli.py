"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 training diverged.
``CALMIX_OUT`` overrides the output directory of every command.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from calmix import bench
from calmix.bench import MetricRecord, append_jsonl
from calmix.checkpoint import load_model, save_checkpoint
from calmix.config import ExperimentConfig, load_config
from calmix.errors import CheckpointError, ConfigError, TrainingDiverged

log = logging.getLogger("calmix")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def _out_dir(default: str) -> Path:
    return Path(os.environ.get("CALMIX_OUT") or default)


def checkpoint_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "checkpoints" / f"{config.setting}-{config.run_hash}"


def cmd_train(config: ExperimentConfig, overwrite: bool = False) -> MetricRecord:
    """Train one run, write its checkpoint and append its record."""
    from calmix.experiment import model_spec, run_experiment

    ckpt = checkpoint_dir(config)
    if ckpt.exists() and not overwrite:
        raise FileExistsError(f"{ckpt} exists; pass --overwrite to replace it")
    try:
        result = run_experiment(config)
    except TrainingDiverged as exc:
        record = MetricRecord(
            top1=0.0, train_time_min=0.0, throughput_sps=0.0,
            config_id=config.config_id, seed=config.seed, dataset=config.dataset,
            backbone=config.backbone, setting=config.setting, image_size=config.image_size,
            learning_rate=config.learning_rate, diverged=True, extra={"error": str(exc)},
        )
        append_jsonl(config.results_path, record.to_dict())
        raise
    record = result.record
    save_checkpoint(
        ckpt,
        result.model,
        model_spec=model_spec(config, result.model.num_classes),
        config_hash=config.run_hash,
        metrics={"top1": record.top1, "train_time_min": record.train_time_min, "throughput_sps": record.throughput_sps},
        overwrite=overwrite,
    )
    record.extra["checkpoint"] = str(ckpt)
    append_jsonl(config.results_path, record.to_dict())
    return record


def cmd_sweep(config: ExperimentConfig, stage: str, evaluator=None, runner=None):
    from calmix.experiment import sweep_lr, sweep_seeds

    if stage == "lr":
        return sweep_lr(config, evaluator)
    if stage == "seeds":
        return sweep_seeds(config, runner)
    raise ConfigError(f"--stage must be lr or seeds, got {stage!r}")


def cmd_benchmark(
    checkpoint,
    setting: str,
    batch_size: int,
    num_samples: int = 512,
    warmup_batches: int = 2,
    warmup_seconds: float = 0.0,
    repeats: int = 1,
    wait: bool = True,
    results: Optional[Path] = None,
) -> dict:
    """Measure batched throughput of a checkpoint under the machine-wide lock."""
    from filelock import Timeout

    model, manifest = load_model(checkpoint, setting)
    try:
        with bench.throughput_lock(wait=wait):
            runs = [
                bench.measure_throughput(model, setting, batch_size, num_samples, warmup_batches,
                                         warmup_seconds=warmup_seconds)
                for _ in range(repeats)
            ]
    except Timeout:
        raise ConfigError("throughput lock is held by another process (--no-wait given)") from None
    record = {
        "kind": "throughput",
        "checkpoint": str(checkpoint),
        "config_hash": manifest.get("config_hash", ""),
        "setting": setting,
        "batch_size": batch_size,
        "num_samples": num_samples,
        "warmup_batches": warmup_batches,
        "warmup_seconds": warmup_seconds,
        "throughput_sps": float(np.median(runs)),
        "runs": runs,
    }
    if results is not None:
        append_jsonl(results, record)
    return record


def cmd_report(results_dir, out_dir=None, overwrite: bool = False) -> list[Path]:
    from calmix.report import build_report

    try:
        return build_report(results_dir, out_dir, overwrite)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None


def cmd_gen_data(out, classes: int, per_class: int, size: int, seed: int, overwrite: bool = False):
    from calmix.datasets import generate_synthetic_fgir

    out = Path(out)
    if (out / "manifest.csv").exists():
        if not overwrite:
            raise FileExistsError(f"{out} already holds a dataset; pass --overwrite to replace it")
        shutil.rmtree(out)
    return generate_synthetic_fgir(out, classes, per_class, size, seed)


def cmd_dump_aug(config: ExperimentConfig, out, count: int = 8, checkpoint=None, seed: int = 0) -> list[Path]:
    """Write original and attention-augmented training images as PNG."""
    from PIL import Image

    from calmix.experiment import load_dataset
    from calmix.settings import TrEvSetting, augment_views, build_model

    setting = config.trev if config.trev.uses_attention else TrEvSetting.CALMIX
    train, _ = load_dataset(config)
    if checkpoint is not None:
        model, _ = load_model(checkpoint, setting)
    else:
        model = build_model(setting, config.backbone, train.num_classes, config.image_size,
                            num_maps=config.num_maps, params=config.augment_params(), seed=config.seed)
    images, labels = train.images[:count], train.labels[:count]
    model.eval()
    with torch.no_grad():
        _, attention = model.head(model.features(images))
        views, ops = augment_views(setting, images, labels, attention, np.random.default_rng(seed), model.params)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (orig, view, op) in enumerate(zip(images, views, ops)):
        for tag, img in (("orig", orig), (op, view)):
            pixels = (img.permute(1, 2, 0).clamp(0, 1).numpy() * 255).round().astype(np.uint8)
            path = out / f"{i:03d}_{tag}.png"
            Image.fromarray(pixels).save(path)
            written.append(path)
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="calmix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("config")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("sweep", help="two-stage protocol: LR search, then seeds")
    p.add_argument("config")
    p.add_argument("--stage", choices=("lr", "seeds"), required=True)

    p = sub.add_parser("benchmark", help="batched inference throughput of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--setting", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--num-samples", type=int, default=512)
    p.add_argument("--warmup-batches", type=int, default=2)
    p.add_argument("--warmup-seconds", type=float, default=0.0,
                   help="keep warming up for at least this long before timing")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-wait", action="store_true", help="fail instead of waiting for the throughput lock")
    p.add_argument("--results", help="JSONL file to append to (default: <out>/results.jsonl)")

    p = sub.add_parser("report", help="CSV, SVG and relative-change report")
    p.add_argument("results_dir")
    p.add_argument("--out")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("gen-data", help="write the synthetic fine-grained dataset")
    p.add_argument("out")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("conformance", help="adapter conformance checks for registered backbones")
    p.add_argument("--backbone", action="append", help="repeatable; default: all registered")

    p = sub.add_parser("dump-aug", help="save attention-augmented training images as PNG")
    p.add_argument("config")
    p.add_argument("--checkpoint")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _run(args) -> int:
    if args.command == "train":
        record = cmd_train(load_config(args.config), args.overwrite)
        print(f"top1={record.top1:.4f} train_time_min={record.train_time_min:.3f} "
              f"throughput_sps={record.throughput_sps:.1f}")
    elif args.command == "sweep":
        result = cmd_sweep(load_config(args.config), args.stage)
        print(result if args.stage == "lr" else
              f"top1 mean={result['top1_mean']:.4f} std={result['top1_std']:.4f}")
    elif args.command == "benchmark":
        results = Path(args.results) if args.results else _out_dir("runs") / "results.jsonl"
        record = cmd_benchmark(args.checkpoint, args.setting, args.batch_size, args.num_samples,
                               args.warmup_batches, args.warmup_seconds, args.repeats,
                               not args.no_wait, results)
        print(f"{record['setting']}: {record['throughput_sps']:.1f} samples/s")
    elif args.command == "report":
        out = args.out or (os.path.join(os.environ["CALMIX_OUT"], "report") if os.environ.get("CALMIX_OUT") else None)
        for path in cmd_report(args.results_dir, out, args.overwrite):
            print(path)
    elif args.command == "gen-data":
        manifest = cmd_gen_data(args.out, args.classes, args.per_class, args.size, args.seed, args.overwrite)
        print(f"{len(manifest.rows)} images, {manifest.num_classes} classes -> {args.out}")
    elif args.command == "conformance":
        from calmix.backbones import list_backbones
        from calmix.conformance import check_backbone

        failed = 0
        for name in args.backbone or list_backbones():
            for check in check_backbone(name):
                failed += not check.passed
                print(f"{name:12s} {check.name:28s} {'PASS' if check.passed else 'FAIL'} {check.detail}")
        return EXIT_USAGE if failed else EXIT_OK
    elif args.command == "dump-aug":
        config = load_config(args.config)
        out = args.out or Path(config.output_dir) / "dump-aug"
        paths = cmd_dump_aug(config, out, args.count, args.checkpoint, args.seed)
        print(f"wrote {len(paths)} images to {out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
