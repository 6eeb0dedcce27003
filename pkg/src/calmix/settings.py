"""The six training-and-evaluation settings.

``FZ`` and ``FT`` train a global-pool linear head on top of a frozen or
fully trainable backbone. The CAL family uses the attention head, with a
second backbone pass on an attention-augmented view during training.
``CAL`` and ``CALMIX`` also run that second pass at inference on an
attention crop; the ``_NC`` variants train identically but infer in a
single pass.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from calmix.attention import AttentionHead, cal_loss
from calmix.augment import (
    attention_crop,
    attention_mask,
    bbox_from_attention,
    mix_pair,
    pair_same_class,
    select_attention_map,
)
from calmix.backbones import BackboneAdapter, create_backbone, freeze
from calmix.errors import ConfigError, TrainingDiverged

__all__ = [
    "AugmentParams",
    "InferencePath",
    "LinearHead",
    "ModelBundle",
    "StepOutput",
    "TrEvSetting",
    "augment_views",
    "build_model",
    "count_backbone_passes",
    "infer",
    "make_optimizer",
    "reset_backbone_passes",
    "train_step",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class InferencePath(enum.Enum):
    ONE_PASS = 1
    TWO_PASS = 2


class TrEvSetting(str, enum.Enum):
    FZ = "FZ"
    FT = "FT"
    CAL = "CAL"
    CAL_NC = "CAL_NC"
    CALMIX = "CALMIX"
    CALMIX_NC = "CALMIX_NC"

    @classmethod
    def parse(cls, value) -> "TrEvSetting":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise ConfigError(f"unknown setting {value!r} (expected one of {names})") from None

    @property
    def inference_path(self) -> InferencePath:
        if self in (TrEvSetting.CAL, TrEvSetting.CALMIX):
            return InferencePath.TWO_PASS
        return InferencePath.ONE_PASS

    @property
    def frozen_backbone(self) -> bool:
        return self is TrEvSetting.FZ

    @property
    def uses_attention(self) -> bool:
        return self not in (TrEvSetting.FZ, TrEvSetting.FT)

    @property
    def mixes(self) -> bool:
        return self in (TrEvSetting.CALMIX, TrEvSetting.CALMIX_NC)


@dataclass
class AugmentParams:
    crop_threshold: float = 0.5
    mask_threshold: float = 0.5
    crop_padding: float = 0.1
    lambda_cf: float = 1.0
    num_cf_samples: int = 1

    def __post_init__(self):
        for name in ("crop_threshold", "mask_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if not 0.0 <= self.crop_padding < 0.5:
            raise ConfigError(f"crop_padding must lie in [0, 0.5), got {self.crop_padding}")
        if self.lambda_cf < 0:
            raise ConfigError(f"lambda_cf must be >= 0, got {self.lambda_cf}")
        if self.num_cf_samples < 1:
            raise ConfigError(f"num_cf_samples must be >= 1, got {self.num_cf_samples}")


class LinearHead(nn.Module):
    """Global average pooling followed by a linear classifier."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(features.mean(dim=(2, 3)))


class ModelBundle(nn.Module):
    """Backbone plus the head matching a setting family."""

    def __init__(
        self,
        backbone: BackboneAdapter,
        head: nn.Module,
        num_classes: int,
        image_size: int,
        params: Optional[AugmentParams] = None,
        mean: Sequence[float] = IMAGENET_MEAN,
        std: Sequence[float] = IMAGENET_STD,
    ):
        super().__init__()
        self.backbone = backbone
        self.head = head
        self.num_classes = num_classes
        self.image_size = image_size
        self.params = params or AugmentParams()
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1), persistent=False)

    @property
    def attention_family(self) -> bool:
        return isinstance(self.head, AttentionHead)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Normalize ``[0, 1]`` images and run the backbone (one counted pass)."""
        return self.backbone((images - self.mean.to(images.dtype)) / self.std.to(images.dtype))


@dataclass
class StepOutput:
    loss: float
    logits: dict[str, torch.Tensor] = field(default_factory=dict)
    pass_count: int = 0


def build_model(
    setting,
    backbone_name: str,
    num_classes: int,
    image_size: int,
    num_maps: int = 32,
    params: Optional[AugmentParams] = None,
    seed: Optional[int] = None,
    backbone_kwargs: Optional[dict] = None,
) -> ModelBundle:
    setting = TrEvSetting.parse(setting)
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if seed is not None:
        torch.manual_seed(seed)
    backbone = create_backbone(backbone_name, **(backbone_kwargs or {}))
    if setting.uses_attention:
        head: nn.Module = AttentionHead(backbone.feature_channels, num_classes, num_maps)
    else:
        head = LinearHead(backbone.feature_channels, num_classes)
    if setting.frozen_backbone:
        freeze(backbone)
    return ModelBundle(backbone, head, num_classes, image_size, params)


def make_optimizer(
    model: nn.Module,
    lr: float,
    total_steps: int,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LRScheduler]:
    """SGD with momentum and per-step cosine decay over ``total_steps``."""
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(total_steps, 1))
    return optimizer, scheduler


def count_backbone_passes(model: ModelBundle) -> int:
    """Per-sample backbone invocations since the last reset."""
    return model.backbone.sample_passes


def reset_backbone_passes(model: ModelBundle) -> None:
    model.backbone.reset_counters()


def _check_family(setting: TrEvSetting, model: ModelBundle) -> None:
    if setting.uses_attention != model.attention_family:
        kind = "attention" if model.attention_family else "linear"
        raise ConfigError(f"setting {setting.value} cannot run on a model with a {kind} head")


def _check_inputs(model: ModelBundle, images: torch.Tensor, labels: Optional[torch.Tensor] = None) -> None:
    if images.ndim != 4 or images.shape[0] == 0:
        raise ConfigError(f"expected a non-empty (B, 3, H, W) batch, got {tuple(images.shape)}")
    if tuple(images.shape[-2:]) != (model.image_size, model.image_size):
        raise ConfigError(
            f"batch images are {tuple(images.shape[-2:])}, model expects {model.image_size}"
        )
    if labels is not None and (int(labels.min()) < 0 or int(labels.max()) >= model.num_classes):
        raise ValueError(f"label out of range for {model.num_classes} classes")


def _crop_view(image: torch.Tensor, attention_map: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    _, height, width = image.shape
    box = bbox_from_attention(attention_map, params.crop_threshold)
    box = box.padded(params.crop_padding, height, width)
    return attention_crop(image, box, (height, width))


def augment_views(
    setting: TrEvSetting,
    images: torch.Tensor,
    labels: torch.Tensor,
    attention: torch.Tensor,
    rng: np.random.Generator,
    params: AugmentParams,
) -> tuple[torch.Tensor, list[str]]:
    """One attention-augmented view per sample, plus the op applied to each."""
    size = tuple(images.shape[-2:])
    maps = [select_attention_map(a, size, rng) for a in attention]
    partners = pair_same_class(labels.tolist(), rng) if setting.mixes else [None] * len(maps)
    num_ops = 3 if setting.mixes else 2
    views, ops = [], []
    for i, image in enumerate(images):
        op = ("crop", "mask", "mix")[int(rng.integers(num_ops))]
        j = partners[i]
        if op == "mix" and j is None:
            op = "crop"
        if op == "crop":
            view = _crop_view(image, maps[i], params)
        elif op == "mask":
            view = attention_mask(image, maps[i], params.mask_threshold)
        else:
            view = mix_pair(image, maps[i], images[j], maps[j], params.crop_threshold)[0]
        views.append(view)
        ops.append(op)
    return torch.stack(views), ops


def train_step(
    setting,
    model: ModelBundle,
    batch: tuple[torch.Tensor, torch.Tensor],
    rng: np.random.Generator,
    optimizer: torch.optim.Optimizer,
    step: int = 0,
) -> StepOutput:
    """One optimization step; raises :class:`TrainingDiverged` on a non-finite loss."""
    setting = TrEvSetting.parse(setting)
    _check_family(setting, model)
    images, labels = batch
    _check_inputs(model, images, labels)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    before = count_backbone_passes(model)
    p = model.params

    if not setting.uses_attention:
        logits = model.head(model.features(images))
        loss = F.cross_entropy(logits, labels)
        branches = {"raw": logits.detach()}
    else:
        features = model.features(images)
        factual, attention = model.head(features)
        effect = model.head.effect(features, factual, rng, p.num_cf_samples)
        raw_loss = cal_loss(factual, effect, labels, p.lambda_cf)

        with torch.no_grad():
            views, _ = augment_views(setting, images, labels, attention.detach(), rng, p)
        aug_features = model.features(views)
        aug_factual, _ = model.head(aug_features)
        aug_effect = model.head.effect(aug_features, aug_factual, rng, p.num_cf_samples)
        aug_loss = cal_loss(aug_factual, aug_effect, labels, p.lambda_cf)

        loss = 0.5 * (raw_loss + aug_loss)
        branches = {"raw": factual.detach(), "aug": aug_factual.detach()}

    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDiverged(step, value)
    loss.backward()
    optimizer.step()
    return StepOutput(loss=value, logits=branches, pass_count=count_backbone_passes(model) - before)


def _inference_crops(
    images: torch.Tensor, attention: torch.Tensor, params: AugmentParams
) -> torch.Tensor:
    size = tuple(images.shape[-2:])
    crops = []
    for image, maps in zip(images, attention):
        selected = select_attention_map(maps, size)
        crops.append(_crop_view(image, selected, params))
    return torch.stack(crops)


@torch.no_grad()
def infer(setting, model: ModelBundle, images: torch.Tensor, return_branches: bool = False):
    """Class probabilities ``(B, num_classes)`` along the setting's inference path.

    Two-pass settings average the softmax of the full-image pass and of the
    pass on the deterministic (highest-mass map) attention crop.
    """
    setting = TrEvSetting.parse(setting)
    _check_family(setting, model)
    _check_inputs(model, images)
    model.eval()
    features = model.features(images)
    if not setting.uses_attention:
        probs = F.softmax(model.head(features), dim=-1)
        return (probs, {"raw": probs}) if return_branches else probs

    logits, attention = model.head(features)
    branches = {"raw": logits}
    probs = F.softmax(logits, dim=-1)
    if setting.inference_path is InferencePath.TWO_PASS:
        crops = _inference_crops(images, attention, model.params)
        crop_logits, _ = model.head(model.features(crops))
        branches["crop"] = crop_logits
        branches["crop_images"] = crops
        probs = 0.5 * (probs + F.softmax(crop_logits, dim=-1))
    return (probs, branches) if return_branches else probs
