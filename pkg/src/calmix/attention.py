"""Bilinear attention pooling and counterfactual attention supervision.

Tensors are channels-first and batched: feature maps are ``(B, C, h, w)``,
attention maps ``(B, M, h, w)``, part features ``(B, M, C)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from calmix.errors import ConfigError

__all__ = [
    "AttentionHead",
    "bap",
    "cal_loss",
    "classify_parts",
    "compute_attention",
    "counterfactual_effect",
    "normalize_parts",
    "sample_counterfactual_attention",
]


def compute_attention(
    features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None
) -> torch.Tensor:
    """1x1 projection from C to M channels, negatives clamped to zero.

    ``weight`` is ``(M, C)`` (a conv weight ``(M, C, 1, 1)`` is accepted too).
    """
    if weight.ndim == 4:
        weight = weight.flatten(1)
    if weight.shape[1] != features.shape[1]:
        raise ConfigError(
            f"attention projection expects {weight.shape[1]} channels, "
            f"feature map has {features.shape[1]}"
        )
    out = torch.einsum("mc,bchw->bmhw", weight, features)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return F.relu(out)


def normalize_parts(parts: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Signed square root, then unit L2 norm per part row (zero rows stay zero)."""
    # eps keeps the sqrt gradient finite near zero; sign(0) == 0 pins exact zeros
    signed = torch.sign(parts) * torch.sqrt(parts.abs() + eps)
    return F.normalize(signed, dim=-1, eps=eps)


def bap(features: torch.Tensor, attention: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Bilinear attention pooling.

    ``P[b, m, c] = mean_{h,w} A[b, m, h, w] * F[b, c, h, w]``, optionally
    followed by :func:`normalize_parts`.
    """
    if features.shape[0] != attention.shape[0] or features.shape[2:] != attention.shape[2:]:
        raise ConfigError(
            f"attention {tuple(attention.shape)} does not match features {tuple(features.shape)}"
        )
    h, w = features.shape[2:]
    parts = torch.einsum("bmhw,bchw->bmc", attention, features) / float(h * w)
    return normalize_parts(parts) if normalize else parts


def classify_parts(
    parts: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None
) -> torch.Tensor:
    flat = parts.flatten(1)
    if weight.shape[1] != flat.shape[1]:
        raise ConfigError(
            f"classifier expects input width {weight.shape[1]}, parts flatten to {flat.shape[1]}"
        )
    return F.linear(flat, weight, bias)


def sample_counterfactual_attention(
    shape: Sequence[int],
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Uniform [0, 1) attention; a constant, never part of the autograd graph."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ConfigError(f"invalid counterfactual attention shape {shape}")
    return torch.from_numpy(rng.random(shape)).to(dtype)


def counterfactual_effect(
    factual: torch.Tensor, counterfactuals: Sequence[torch.Tensor]
) -> torch.Tensor:
    if len(counterfactuals) == 0:
        raise ValueError("at least one counterfactual sample is required")
    for cf in counterfactuals:
        if cf.shape != factual.shape:
            raise ConfigError(f"counterfactual logits {tuple(cf.shape)} != {tuple(factual.shape)}")
    return factual - torch.stack(list(counterfactuals)).mean(dim=0)


def cal_loss(
    factual: torch.Tensor,
    effect: torch.Tensor,
    labels: torch.Tensor,
    lambda_cf: float = 1.0,
) -> torch.Tensor:
    """Cross-entropy on the factual logits plus ``lambda_cf`` times the
    cross-entropy on the counterfactual effect. Batch-averaged."""
    num_classes = factual.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes")
    loss = F.cross_entropy(factual, labels)
    if lambda_cf:
        loss = loss + lambda_cf * F.cross_entropy(effect, labels)
    return loss


class AttentionHead(nn.Module):
    """Attention projection, BAP and part classifier in one module."""

    def __init__(self, in_channels: int, num_classes: int, num_maps: int = 32):
        super().__init__()
        if num_maps < 1:
            raise ConfigError("num_maps must be >= 1")
        self.in_channels = in_channels
        self.num_maps = num_maps
        self.num_classes = num_classes
        self.attention = nn.Conv2d(in_channels, num_maps, kernel_size=1)
        self.classifier = nn.Linear(num_maps * in_channels, num_classes)

    @property
    def input_width(self) -> int:
        return self.classifier.in_features

    def attention_maps(self, features: torch.Tensor) -> torch.Tensor:
        return compute_attention(features, self.attention.weight, self.attention.bias)

    def logits(self, features: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
        return classify_parts(bap(features, attention), self.classifier.weight, self.classifier.bias)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        attention = self.attention_maps(features)
        return self.logits(features, attention), attention

    def effect(
        self,
        features: torch.Tensor,
        factual: torch.Tensor,
        rng: np.random.Generator,
        num_samples: int = 1,
    ) -> torch.Tensor:
        b, _, h, w = features.shape
        cf_logits = [
            self.logits(
                features,
                sample_counterfactual_attention((b, self.num_maps, h, w), rng, features.dtype),
            )
            for _ in range(num_samples)
        ]
        return counterfactual_effect(factual, cf_logits)
