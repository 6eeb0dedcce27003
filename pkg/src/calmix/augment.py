"""Attention-guided augmentations: crop, mask and same-class region mixing.

Images are single ``(3, H, W)`` tensors with values in [0, 1]; selected
attention maps are ``(H, W)`` tensors at image resolution, rescaled to
[0, 1]. All randomness comes from an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from calmix.errors import ConfigError

__all__ = [
    "CropBox",
    "attention_crop",
    "attention_mask",
    "bbox_from_attention",
    "mix_pair",
    "pair_same_class",
    "resize",
    "rescale_map",
    "select_attention_map",
]


@dataclass(frozen=True)
class CropBox:
    """Half-open pixel rectangle: rows ``row0..row1-1``, cols ``col0..col1-1``."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self):
        if not (0 <= self.row0 < self.row1 and 0 <= self.col0 < self.col1):
            raise ValueError(f"degenerate crop box {self}")

    @classmethod
    def full(cls, height: int, width: int) -> "CropBox":
        return cls(0, 0, height, width)

    @property
    def height(self) -> int:
        return self.row1 - self.row0

    @property
    def width(self) -> int:
        return self.col1 - self.col0

    def contains(self, other: "CropBox") -> bool:
        return (
            self.row0 <= other.row0
            and self.col0 <= other.col0
            and self.row1 >= other.row1
            and self.col1 >= other.col1
        )

    def padded(self, ratio: float, height: int, width: int) -> "CropBox":
        """Grow by ``ratio`` of the image size on every side, clamped to the image."""
        dr = int(ratio * height)
        dc = int(ratio * width)
        return CropBox(
            max(self.row0 - dr, 0),
            max(self.col0 - dc, 0),
            min(self.row1 + dr, height),
            min(self.col1 + dc, width),
        )

    def slices(self) -> tuple[slice, slice]:
        return slice(self.row0, self.row1), slice(self.col0, self.col1)


def resize(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a ``(C, H, W)`` tensor; half-pixel centers, edge clamped."""
    if tuple(image.shape[-2:]) == tuple(size):
        return image.clone()
    return F.interpolate(image[None], size=tuple(size), mode="bilinear", align_corners=False)[0]


def rescale_map(values: torch.Tensor) -> torch.Tensor:
    """Min-max rescale to [0, 1]; a constant positive map becomes all ones,
    an all-zero map stays zero."""
    lo, hi = values.min(), values.max()
    if hi > lo:
        return (values - lo) / (hi - lo)
    if hi > 0:
        return torch.ones_like(values)
    return torch.zeros_like(values)


def select_attention_map(
    attention: torch.Tensor,
    image_size: tuple[int, int],
    rng: Optional[np.random.Generator] = None,
) -> torch.Tensor:
    """Pick one of the ``(M, h, w)`` maps and bring it to image resolution.

    With an ``rng`` the map is drawn with probability proportional to its
    total mass (uniformly if every mass is zero). Without one, the map with
    the largest mass is taken, which is what inference uses.
    """
    attention = attention.detach()
    masses = attention.flatten(1).sum(dim=1).double().cpu().numpy()
    if rng is None:
        index = int(np.argmax(masses))
    else:
        total = masses.sum()
        p = masses / total if total > 0 else np.full(len(masses), 1.0 / len(masses))
        index = int(rng.choice(len(masses), p=p))
    upsampled = resize(attention[index : index + 1], image_size)[0]
    return rescale_map(upsampled)


def bbox_from_attention(attention_map: torch.Tensor, threshold: float) -> CropBox:
    """Tightest box around every pixel with value >= threshold (full image if none)."""
    height, width = attention_map.shape
    hits = attention_map >= threshold
    rows = torch.nonzero(hits.any(dim=1)).flatten()
    if rows.numel() == 0:
        return CropBox.full(height, width)
    cols = torch.nonzero(hits.any(dim=0)).flatten()
    return CropBox(int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)


def attention_crop(image: torch.Tensor, box: CropBox, out_size: tuple[int, int]) -> torch.Tensor:
    _, height, width = image.shape
    if box.row1 > height or box.col1 > width:
        raise ValueError(f"{box} exceeds image of size {(height, width)}")
    rows, cols = box.slices()
    return resize(image[:, rows, cols], out_size).clamp_(0.0, 1.0)


def attention_mask(image: torch.Tensor, attention_map: torch.Tensor, threshold: float) -> torch.Tensor:
    """Zero every pixel where the map reaches the threshold."""
    if tuple(attention_map.shape) != tuple(image.shape[-2:]):
        raise ConfigError(
            f"map {tuple(attention_map.shape)} is not at image resolution {tuple(image.shape[-2:])}"
        )
    return image.masked_fill(attention_map >= threshold, 0.0)


def pair_same_class(labels: Sequence[int], rng: np.random.Generator) -> list[Optional[int]]:
    """For every index, a uniformly drawn other index with the same label, or None."""
    labels = [int(y) for y in labels]
    if not labels:
        raise ValueError("cannot pair an empty batch")
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        by_class.setdefault(y, []).append(i)
    partners: list[Optional[int]] = []
    for i, y in enumerate(labels):
        candidates = [j for j in by_class[y] if j != i]
        partners.append(candidates[int(rng.integers(len(candidates)))] if candidates else None)
    return partners


def _paste(dest: torch.Tensor, dest_box: CropBox, source: torch.Tensor, source_box: CropBox) -> torch.Tensor:
    out = dest.clone()
    rows, cols = source_box.slices()
    patch = resize(source[:, rows, cols], (dest_box.height, dest_box.width)).clamp_(0.0, 1.0)
    out[(slice(None),) + dest_box.slices()] = patch
    return out


def mix_pair(
    image_a: torch.Tensor,
    map_a: torch.Tensor,
    image_b: torch.Tensor,
    map_b: torch.Tensor,
    threshold: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Swap the discriminative regions of two same-class images.

    Each image's own thresholded box receives the partner's box, resized to
    fit. Pixels outside the destination boxes are untouched.
    """
    if image_a.shape != image_b.shape:
        raise ConfigError(f"cannot mix images of shapes {tuple(image_a.shape)} and {tuple(image_b.shape)}")
    box_a = bbox_from_attention(map_a, threshold)
    box_b = bbox_from_attention(map_b, threshold)
    return _paste(image_a, box_a, image_b, box_b), _paste(image_b, box_b, image_a, box_a)
