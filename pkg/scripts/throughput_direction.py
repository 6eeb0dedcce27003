"""Batched throughput of every setting on TinyConvNet at 64 px.

Attention-head settings share one checkpoint, so CAL and CAL_NC differ only
in the inference path.

    python3 scripts/throughput_direction.py --repeats 5
"""

import argparse
import statistics
import tempfile
from pathlib import Path

import torch

from calmix.bench import measure_throughput
from calmix.checkpoint import load_model, save_checkpoint
from calmix.settings import TrEvSetting, build_model


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--num-samples", type=int, default=512)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--warmup-seconds", type=float, default=1.0)
    args = parser.parse_args()
    torch.set_num_threads(1)

    images = torch.rand(args.num_samples, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    with tempfile.TemporaryDirectory() as tmp:
        spec = {"setting": "CAL", "backbone": "tiny", "num_classes": 8, "image_size": 64, "num_maps": 32}
        save_checkpoint(Path(tmp) / "cal", build_model("CAL", "tiny", 8, 64, seed=0), model_spec=spec)
        rates = {}
        for setting in TrEvSetting:
            if setting.uses_attention:
                model, _ = load_model(Path(tmp) / "cal", setting)
            else:
                model = build_model(setting, "tiny", 8, 64, seed=0)
            runs = [
                measure_throughput(model, setting, args.batch_size, args.num_samples,
                                   images=images, warmup_seconds=args.warmup_seconds)
                for _ in range(args.repeats)
            ]
            rates[setting] = statistics.median(runs)
            spread = (max(runs) - min(runs)) / rates[setting]
            print(f"{setting.value:10s} {rates[setting]:8.0f} samples/s  spread {spread:6.1%}")
    print(f"CAL_NC / CAL = {rates[TrEvSetting.CAL_NC] / rates[TrEvSetting.CAL]:.2f}x")
    print(f"CALMIX_NC / CALMIX = {rates[TrEvSetting.CALMIX_NC] / rates[TrEvSetting.CALMIX]:.2f}x")


if __name__ == "__main__":
    main()
