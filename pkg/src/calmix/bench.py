"""Metrics, min-max normalization and the two-stage experiment protocol."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from calmix.errors import TrainingDiverged

log = logging.getLogger(__name__)

__all__ = [
    "LR_GRID",
    "LRTrial",
    "MetricRecord",
    "append_jsonl",
    "lr_search",
    "measure_throughput",
    "measure_train_time",
    "minmax_normalize",
    "multi_seed_aggregate",
    "read_jsonl",
    "relative_change",
    "throughput_lock",
    "top1_accuracy",
]

LR_GRID = (0.3, 0.1, 0.03, 0.01, 0.003)
METRIC_AXES = ("top1", "train_time_min", "throughput_sps")


@dataclass
class MetricRecord:
    """One run: top-1 in [0, 1], training minutes, batched samples/second."""

    top1: float
    train_time_min: float
    throughput_sps: float
    config_id: str
    seed: int
    dataset: str = ""
    backbone: str = ""
    setting: str = ""
    image_size: int = 0
    learning_rate: float = 0.0
    kind: str = "run"
    diverged: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.diverged:
            for axis in METRIC_AXES:
                value = getattr(self, axis)
                if not math.isfinite(value):
                    raise ValueError(f"{axis} must be finite, got {value}")
            if not 0.0 <= self.top1 <= 1.0:
                raise ValueError(f"top1 must lie in [0, 1], got {self.top1}")
            if self.train_time_min < 0:
                raise ValueError(f"train_time_min must be >= 0, got {self.train_time_min}")
            if self.throughput_sps <= 0:
                raise ValueError(f"throughput_sps must be > 0, got {self.throughput_sps}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricRecord":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


def top1_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> float:
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("top-1 accuracy of an empty set is undefined")
    p = np.asarray(predictions)
    y = np.asarray(labels)
    return float(np.count_nonzero(p == y)) / len(y)


def measure_train_time(run: Callable[[], object]) -> tuple[float, object]:
    """Wall-clock minutes spent inside ``run()``, and its return value.

    Exceptions propagate unchanged.
    """
    start = time.perf_counter()
    result = run()
    return (time.perf_counter() - start) / 60.0, result


def measure_throughput(
    model,
    setting,
    batch_size: int,
    num_samples: int,
    warmup_batches: int = 2,
    images: Optional[torch.Tensor] = None,
    seed: int = 0,
    warmup_seconds: float = 0.0,
) -> float:
    """Batched inference samples per second along the setting's infer path.

    Untimed warmup runs for at least ``warmup_batches`` batches and at least
    ``warmup_seconds``; shared or burstable CPUs often run fast for a moment
    after idling, and the warmup lets that settle. The remaining batches are
    timed one by one and the median latency sets the rate. ``images``
    defaults to a fixed random tensor of the model's input size.
    """
    from calmix.settings import infer

    if batch_size < 1 or warmup_batches < 0 or warmup_seconds < 0:
        raise ValueError("batch_size must be >= 1, warmup_batches and warmup_seconds >= 0")
    if num_samples < batch_size * (warmup_batches + 1):
        raise ValueError(
            f"num_samples={num_samples} is too small for batch {batch_size} "
            f"with {warmup_batches} warmup batches"
        )
    if images is None:
        gen = torch.Generator().manual_seed(seed)
        images = torch.rand(batch_size, 3, model.image_size, model.image_size, generator=gen)
    num_batches = num_samples // batch_size

    def batch(i: int) -> torch.Tensor:
        start = (i * batch_size) % len(images)
        chunk = images[start : start + batch_size]
        if len(chunk) < batch_size:
            chunk = torch.cat([chunk, images[: batch_size - len(chunk)]])
        return chunk

    start, i = time.perf_counter(), 0
    while i < warmup_batches or time.perf_counter() - start < warmup_seconds:
        infer(setting, model, batch(i))
        i += 1
    # median batch latency: a single descheduled batch should not move the figure
    latencies = []
    for i in range(warmup_batches, num_batches):
        chunk = batch(i)
        t0 = time.perf_counter()
        infer(setting, model, chunk)
        latencies.append(time.perf_counter() - t0)
    return batch_size / float(np.median(latencies))


def throughput_lock(path: Optional[str] = None, wait: bool = True):
    """Machine-wide exclusive lock held while timing inference."""
    from filelock import FileLock

    path = path or os.environ.get("CALMIX_LOCK", os.path.join(os.path.expanduser("~"), ".calmix-throughput.lock"))
    return FileLock(path, timeout=-1 if wait else 0)


def minmax_normalize(values: Sequence[float]) -> list[float]:
    """``(x - min) / (max - min)``; an all-equal group maps to zeros."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("cannot normalize an empty group")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return [0.0] * x.size
    return ((x - lo) / (hi - lo)).tolist()


def relative_change(baseline: float, variant: float) -> float:
    """Percent change of ``variant`` relative to ``baseline``."""
    if baseline == 0:
        raise ZeroDivisionError("relative change from a zero baseline is undefined")
    # this ordering is exact for ratios that are representable, e.g. 0.8 / 0.5
    return 100.0 * variant / baseline - 100.0


@dataclass
class LRTrial:
    learning_rate: float
    accuracy: float
    diverged: bool = False


def lr_search(
    evaluate: Callable[[float], float],
    lrs: Iterable[float] = LR_GRID,
) -> tuple[float, list[LRTrial]]:
    """Run ``evaluate(lr)`` (holdout top-1) for every LR and pick the best.

    Ties go to the smaller LR. A run that raises ``TrainingDiverged`` or
    returns a non-finite value is logged with accuracy 0 and skipped.
    """
    trials = []
    for lr in lrs:
        try:
            acc = float(evaluate(lr))
            diverged = not math.isfinite(acc)
        except TrainingDiverged as exc:
            log.warning("lr=%g diverged: %s", lr, exc)
            acc, diverged = 0.0, True
        if diverged:
            acc = 0.0
        trials.append(LRTrial(float(lr), acc, diverged))
    if not trials:
        raise ValueError("lr_search needs at least one learning rate")
    best = min(trials, key=lambda t: (-t.accuracy, t.learning_rate))
    return best.learning_rate, trials


def multi_seed_aggregate(records: Sequence[MetricRecord]) -> dict[str, tuple[float, float]]:
    """Per-axis ``(mean, sample std)`` over runs that differ only by seed."""
    if len(records) < 2:
        raise ValueError(f"multi-seed aggregation needs >= 2 records, got {len(records)}")
    out = {}
    for axis in METRIC_AXES:
        values = np.array([getattr(r, axis) for r in records], dtype=float)
        out[axis] = (float(values.mean()), float(values.std(ddof=1)))
    return out


def append_jsonl(path, record: dict) -> None:
    """Append one JSON object as a single line, flushed to disk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(record, sort_keys=True, separators=(",", ":"))
    with open(path, "a") as fh:
        fh.write(line + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_jsonl(path) -> list[dict]:
    """Parse every complete line; a torn final line from a crash is skipped."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                log.warning("%s: skipping unparseable line", path)
    return out
