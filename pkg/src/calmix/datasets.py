"""Dataset ingestion, holdout splits and a synthetic fine-grained generator.

A dataset on disk is a directory of images plus a CSV manifest with header
``path,label,split`` (paths relative to the dataset root, labels dense
integers, split ``train`` or ``test``). An optional ``classes.txt`` next to
the manifest names the classes, one per line.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from calmix.errors import ConfigError

__all__ = [
    "LabeledDataset",
    "ManifestRow",
    "SplitManifest",
    "baseline_augment",
    "generate_synthetic_fgir",
    "glyph_templates",
    "iterate_batches",
    "load_image_folder",
    "make_holdout_split",
    "read_manifest",
    "write_manifest",
]

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    split: str


@dataclass
class SplitManifest:
    rows: list[ManifestRow]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            k = max((r.label for r in self.rows), default=-1) + 1
            self.class_names = [str(i) for i in range(k)]
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        seen = set()
        for row in self.rows:
            if row.path in seen:
                raise ConfigError(f"duplicate manifest path {row.path!r}")
            seen.add(row.path)
            if row.split not in SPLITS:
                raise ConfigError(f"{row.path}: split must be train or test, got {row.split!r}")
            if not 0 <= row.label < self.num_classes:
                raise ConfigError(f"{row.path}: label {row.label} outside [0, {self.num_classes})")
        used = {r.label for r in self.rows}
        if used != set(range(self.num_classes)):
            missing = sorted(set(range(self.num_classes)) - used)
            raise ConfigError(f"class indices are not dense, missing {missing}")
        for split in SPLITS:
            if not any(r.split == split for r in self.rows):
                raise ConfigError(f"manifest has no {split} rows")

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def class_counts(self, split: Optional[str] = None) -> dict[int, int]:
        counts: dict[int, int] = {}
        for r in self.rows:
            if split is None or r.split == split:
                counts[r.label] = counts.get(r.label, 0) + 1
        return counts


def read_manifest(path) -> SplitManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"path", "label", "split"}:
            raise ConfigError(f"{path}: header must be path,label,split, got {reader.fieldnames}")
        try:
            rows = [ManifestRow(r["path"], int(r["label"]), r["split"].strip()) for r in reader]
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    names_file = path.parent / "classes.txt"
    names = names_file.read_text().splitlines() if names_file.exists() else []
    return SplitManifest(rows, [n for n in names if n])


def write_manifest(manifest: SplitManifest, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for r in manifest.rows:
            writer.writerow([r.path, r.label, r.split])
    (path.parent / "classes.txt").write_text("\n".join(manifest.class_names) + "\n")


@dataclass
class LabeledDataset:
    """Decoded images ``(N, 3, S, S)`` in [0, 1] with integer labels."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    image_size: int
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.num_classes, self.image_size, self.mean, self.std
        )


def _decode(path: Path, image_size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ConfigError(f"cannot decode image {path}: {exc}") from None


def _load_rows(root: Path, rows: list[ManifestRow], image_size: int, num_classes: int, workers: int):
    for r in rows:
        if not (root / r.path).is_file():
            raise FileNotFoundError(f"missing image {r.path} under {root}")
    paths = [root / r.path for r in rows]
    if workers > 1:
        # map() preserves submission order, so batches match a single-worker run
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(lambda p: _decode(p, image_size), paths))
    else:
        arrays = [_decode(p, image_size) for p in paths]
    if arrays:
        images = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float().div_(255.0)
    else:
        images = torch.zeros(0, 3, image_size, image_size)
    labels = torch.tensor([r.label for r in rows], dtype=torch.long)
    return LabeledDataset(images.contiguous(), labels, num_classes, image_size)


def load_image_folder(
    root, manifest: SplitManifest, image_size: int, workers: int = 1
) -> tuple[LabeledDataset, LabeledDataset]:
    root = Path(root)
    k = manifest.num_classes
    return (
        _load_rows(root, manifest.split("train"), image_size, k, workers),
        _load_rows(root, manifest.split("test"), image_size, k, workers),
    )


def make_holdout_split(
    train: LabeledDataset, fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified holdout: ``round(fraction * n_c)`` (at least 1) of each class."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    labels = train.labels.numpy()
    keep, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ConfigError(f"class {int(c)} has {len(idx)} training sample(s); holdout needs >= 2")
        n_eval = min(max(1, math.floor(fraction * len(idx) + 0.5)), len(idx) - 1)
        perm = rng.permutation(idx)
        held.extend(sorted(perm[:n_eval].tolist()))
        keep.extend(sorted(perm[n_eval:].tolist()))
    return train.subset(sorted(keep)), train.subset(sorted(held))


def _random_resized_box(height: int, width: int, rng: np.random.Generator, scale, ratio):
    area = height * width
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def baseline_augment(
    images: torch.Tensor,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.7, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> torch.Tensor:
    """Random horizontal flip and random resized crop, per sample."""
    _, _, height, width = images.shape
    out = []
    for image in images:
        if rng.random() < 0.5:
            image = image.flip(-1)
        top, left, h, w = _random_resized_box(height, width, rng, scale, ratio)
        patch = image[:, top : top + h, left : left + w]
        if (h, w) != (height, width):
            patch = F.interpolate(patch[None], size=(height, width), mode="bilinear", align_corners=False)[0]
        out.append(patch.clamp(0.0, 1.0))
    return torch.stack(out)


def iterate_batches(
    dataset: LabeledDataset,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
    augment: bool = False,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images, labels)``; shuffled when an ``rng`` is given."""
    n = len(dataset)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = torch.as_tensor(order[start : start + batch_size], dtype=torch.long)
        images = dataset.images[idx]
        if augment:
            if rng is None:
                raise ValueError("augmentation needs an rng")
            images = baseline_augment(images, rng)
        yield images, dataset.labels[idx]


def glyph_templates(num_classes: int, image_size: int, seed: int) -> np.ndarray:
    """Binary, left-right symmetric class glyphs of side ~12% of the image.

    Symmetry keeps class identity invariant under horizontal flips. Glyphs
    are redrawn until every pair differs in at least a quarter of the pixels.
    """
    side = max(3, int(round(0.12 * image_size)))
    half = (side + 1) // 2
    min_distance = side * side // 4
    rng = np.random.default_rng([seed, 0x61F])
    glyphs: list[np.ndarray] = []
    while len(glyphs) < num_classes:
        left = rng.random((side, half)) < 0.5
        glyph = np.concatenate([left, left[:, : side - half][:, ::-1]], axis=1)
        if glyph.all() or not glyph.any():
            continue
        if all(np.count_nonzero(glyph != g) >= min_distance for g in glyphs):
            glyphs.append(glyph)
    return np.stack(glyphs)


GLYPH_ON = 0.95
GLYPH_OFF = 0.05


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(1, 3, 6, 6)).astype(np.float32)
    smooth = F.interpolate(torch.from_numpy(coarse), size=(size, size), mode="bicubic", align_corners=False)
    return smooth[0].permute(1, 2, 0).clamp(0.2, 0.8).numpy()


def generate_synthetic_fgir(
    out_dir,
    num_classes: int,
    samples_per_class: int,
    image_size: int,
    seed: int,
    train_fraction: float = 0.8,
) -> SplitManifest:
    """Write a localized-evidence classification task as PNGs plus manifest.

    Every image shares the same smooth random background family; the class
    is carried only by a small glyph placed at a random location away from
    the border. The first ``train_fraction`` of each class is the train split.
    """
    if num_classes < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    if image_size < 8:
        raise ConfigError("image_size must be >= 8")
    out_dir = Path(out_dir)
    glyphs = glyph_templates(num_classes, image_size, seed)
    side = glyphs.shape[1]
    margin = int(0.1 * image_size)
    hi = max(margin, image_size - side - margin)
    rng = np.random.default_rng(seed)
    n_train = int(round(train_fraction * samples_per_class))
    rows = []
    for label in range(num_classes):
        for k in range(samples_per_class):
            split = "train" if k < n_train else "test"
            img = _background(image_size, rng)
            r, c = rng.integers(margin, hi + 1, size=2)
            tile = np.where(glyphs[label], GLYPH_ON, GLYPH_OFF).astype(np.float32)
            img[r : r + side, c : c + side, :] = tile[:, :, None]
            img = img + rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
            pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
            rel = f"images/{split}/c{label:03d}_{k:05d}.png"
            os.makedirs(out_dir / f"images/{split}", exist_ok=True)
            Image.fromarray(pixels).save(out_dir / rel)
            rows.append(ManifestRow(rel, label, split))
    manifest = SplitManifest(rows, [f"class_{i:03d}" for i in range(num_classes)])
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
