"""Backbone adapters, the backbone registry and the tiny reference network.

Every adapter maps a batch of images ``(B, 3, H, W)`` to a feature map
``(B, C, ceil(H / r), ceil(W / r))`` and counts how often it is invoked, so
that the cost contract of each training/evaluation setting can be checked
by instrumentation rather than by timing alone.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import torch
import torch.nn as nn

from calmix.errors import ConfigError

__all__ = [
    "BackboneAdapter",
    "ModuleAdapter",
    "TinyConvNet",
    "create_backbone",
    "freeze",
    "get_backbone",
    "list_backbones",
    "register_backbone",
    "trainable_parameter_count",
]


class BackboneAdapter(nn.Module):
    """Base class for feature extractors.

    Subclasses implement :meth:`extract`; :meth:`forward` wraps it with the
    invocation counters.
    """

    def __init__(self, name: str, feature_channels: int, reduction: int):
        super().__init__()
        self.name = name
        self.feature_channels = int(feature_channels)
        self.reduction = int(reduction)
        self._lock = threading.Lock()
        self._calls = 0
        self._samples = 0

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ConfigError(
                f"{self.name}: expected images of shape (B, 3, H, W), got {tuple(images.shape)}"
            )
        with self._lock:
            self._calls += 1
            self._samples += images.shape[0]
        return self.extract(images)

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        return math.ceil(height / self.reduction), math.ceil(width / self.reduction)

    @property
    def calls(self) -> int:
        with self._lock:
            return self._calls

    @property
    def sample_passes(self) -> int:
        with self._lock:
            return self._samples

    def reset_counters(self) -> None:
        with self._lock:
            self._calls = 0
            self._samples = 0

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def train(self, mode: bool = True):
        # a frozen backbone keeps inference-mode normalization statistics
        return super().train(mode and not self.frozen)

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_lock", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


class ModuleAdapter(BackboneAdapter):
    """Wrap any ``nn.Module`` that already returns a ``(B, C, h, w)`` map.

    This is how third-party pretrained feature extractors are attached, e.g.
    a torchvision ResNet with its pooling and classifier stripped::

        body = nn.Sequential(*list(resnet101(weights=...).children())[:-2])
        register_backbone("rn101", lambda: ModuleAdapter("rn101", body, 2048, 32))
    """

    def __init__(self, name: str, module: nn.Module, feature_channels: int, reduction: int):
        super().__init__(name, feature_channels, reduction)
        self.body = module

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)


class TinyConvNet(BackboneAdapter):
    """Four conv blocks (3x3 conv, batch norm, ReLU, stride-2 downsample).

    With the default widths ``(16, 32, 64, 128)`` the reduction factor is 16
    and the network has roughly 100k parameters. ``widths`` may be shortened
    to truncate the network (one block gives r = 2).
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), name: str = "tiny"):
        widths = tuple(int(w) for w in widths)
        if not widths:
            raise ConfigError("TinyConvNet needs at least one block")
        super().__init__(name, widths[-1], 2 ** len(widths))
        blocks = []
        in_ch = 3
        for out_ch in widths:
            # stride-2 3x3 conv with padding 1 gives ceil(H / 2) on every axis
            blocks += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = out_ch
        self.body = nn.Sequential(*blocks)

    def extract(self, images: torch.Tensor) -> torch.Tensor:
        return self.body(images)


_REGISTRY: dict[str, Callable[..., BackboneAdapter]] = {}
_REGISTRY_LOCK = threading.Lock()


def register_backbone(name: str, constructor: Callable[..., BackboneAdapter]) -> None:
    with _REGISTRY_LOCK:
        if name in _REGISTRY:
            raise ConfigError(f"backbone {name!r} is already registered")
        _REGISTRY[name] = constructor


def unregister_backbone(name: str) -> None:
    with _REGISTRY_LOCK:
        _REGISTRY.pop(name, None)


def get_backbone(name: str) -> Callable[..., BackboneAdapter]:
    try:
        return _REGISTRY[name]
    except KeyError:
        known = ", ".join(list_backbones()) or "<none>"
        raise ConfigError(f"unknown backbone {name!r} (registered: {known})") from None


def list_backbones() -> list[str]:
    return sorted(_REGISTRY)


def create_backbone(name: str, **kwargs) -> BackboneAdapter:
    return get_backbone(name)(**kwargs)


def freeze(adapter: BackboneAdapter) -> BackboneAdapter:
    """Mark every parameter non-trainable and switch to inference statistics."""
    for p in adapter.parameters():
        p.requires_grad_(False)
    adapter.eval()
    return adapter


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


register_backbone("tiny", TinyConvNet)
