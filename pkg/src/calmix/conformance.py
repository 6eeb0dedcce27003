"""Adapter conformance checks runnable against any registered backbone."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from calmix.backbones import create_backbone, freeze, trainable_parameter_count


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def check_backbone(
    name: str,
    sizes: Sequence[int] = (64, 50),
    batch: int = 2,
    seed: int = 0,
    **kwargs,
) -> list[CheckResult]:
    torch.manual_seed(seed)
    adapter = create_backbone(name, **kwargs)
    gen = torch.Generator().manual_seed(seed)
    results = []

    adapter.eval()
    for size in sizes:
        x = torch.rand(batch, 3, size, size, generator=gen)
        with torch.no_grad():
            y = adapter(x)
        want = (batch, adapter.feature_channels, math.ceil(size / adapter.reduction), math.ceil(size / adapter.reduction))
        results.append(CheckResult(f"shape@{size}", tuple(y.shape) == want, f"got {tuple(y.shape)}, want {want}"))
        results.append(CheckResult(f"finite@{size}", bool(torch.isfinite(y).all())))

    x = torch.rand(batch, 3, sizes[0], sizes[0], generator=gen)
    with torch.no_grad():
        a, b = adapter(x), adapter(x)
    results.append(CheckResult("deterministic_eval", torch.equal(a, b)))

    adapter.reset_counters()
    with torch.no_grad():
        adapter(x)
    results.append(
        CheckResult("counters", adapter.calls == 1 and adapter.sample_passes == batch, f"calls={adapter.calls} samples={adapter.sample_passes}")
    )

    freeze(adapter)
    with torch.no_grad():
        c = adapter(x)
    results.append(CheckResult("freeze_trainable_zero", trainable_parameter_count(adapter) == 0))
    results.append(CheckResult("freeze_forward_unchanged", torch.equal(a, c)))
    adapter.train()
    results.append(CheckResult("frozen_stays_eval", not adapter.training))
    return results
