"""Small end-to-end run of the two-stage protocol and the report.

Stage one trains on the training split minus a holdout for every learning
rate in the grid; stage two retrains at the chosen rate for several seeds.
Epochs are kept short so the whole thing finishes in a few minutes.

    python3 scripts/sweep_demo.py --out runs/sweep-demo
"""

import argparse
import logging
from pathlib import Path

import torch

from calmix.cli import cmd_report, cmd_sweep
from calmix.config import ExperimentConfig
from calmix.datasets import generate_synthetic_fgir


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/sweep-demo")
    parser.add_argument("--settings", nargs="+", default=["FZ", "FT", "CAL"])
    parser.add_argument("--epochs", type=int, default=3)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    data_root = out / "data"
    if not (data_root / "manifest.csv").exists():
        generate_synthetic_fgir(data_root, 4, 30, 64, seed=1)

    for setting in args.settings:
        config = ExperimentConfig(
            dataset_root=str(data_root), dataset_name="synthetic-small", setting=setting, image_size=64,
            epochs=args.epochs, num_maps=8, num_seeds=2, throughput_samples=128, output_dir=str(out),
        )
        lr = cmd_sweep(config, "lr")
        aggregate = cmd_sweep(config, "seeds")
        print(f"{setting}: lr={lr} top1 {aggregate['top1_mean']:.3f} +- {aggregate['top1_std']:.3f}")

    for path in cmd_report(out, overwrite=True):
        print(path)


if __name__ == "__main__":
    main()
