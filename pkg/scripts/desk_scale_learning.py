"""Train FT, CAL_NC and CALMIX_NC on the synthetic glyph task and compare.

    python3 scripts/desk_scale_learning.py --out runs/desk --seeds 3

Writes one JSONL record per run under ``--out`` and a report next to it.
"""

import argparse
import logging
import statistics
from pathlib import Path

import torch

from calmix.bench import append_jsonl
from calmix.config import ExperimentConfig
from calmix.datasets import generate_synthetic_fgir
from calmix.experiment import run_experiment
from calmix.report import build_report


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--settings", nargs="+", default=["FT", "CAL_NC", "CALMIX_NC"])
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--lr", type=float, default=0.1)
    parser.add_argument("--classes", type=int, default=8)
    parser.add_argument("--per-class", type=int, default=100)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    data_root = out / "data"
    if not (data_root / "manifest.csv").exists():
        generate_synthetic_fgir(data_root, args.classes, args.per_class, 64, seed=0)

    base = ExperimentConfig(
        dataset_root=str(data_root), dataset_name="synthetic", image_size=64,
        learning_rate=args.lr, epochs=args.epochs, batch_size=32, output_dir=str(out),
    )
    for setting in args.settings:
        accs = []
        for seed in range(args.seeds):
            record = run_experiment(base.replace(setting=setting, seed=seed)).record
            append_jsonl(base.results_path, record.to_dict())
            accs.append(record.top1)
            print(f"{setting:10s} seed={seed} top1={record.top1:.4f} "
                  f"train={record.train_time_min:.2f}min throughput={record.throughput_sps:.0f}/s")
        print(f"{setting:10s} median top1 over {args.seeds} seeds: {statistics.median(accs):.4f}")

    for path in build_report(out, overwrite=True):
        print(path)


if __name__ == "__main__":
    main()
