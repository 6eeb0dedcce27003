"""Epoch loop and evaluation on top of :func:`calmix.settings.train_step`."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from calmix.datasets import LabeledDataset, iterate_batches
from calmix.settings import ModelBundle, TrEvSetting, infer, make_optimizer, train_step

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def fit(
    setting,
    model: ModelBundle,
    train: LabeledDataset,
    *,
    lr: float,
    epochs: int,
    batch_size: int,
    seed: int,
    baseline_aug: bool = True,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainLog:
    """Train ``model`` in place. Raises ``TrainingDiverged`` on a non-finite loss."""
    setting = TrEvSetting.parse(setting)
    steps_per_epoch = -(-len(train) // batch_size)
    optimizer, scheduler = make_optimizer(model, lr, epochs * steps_per_epoch, momentum, weight_decay)
    rng = np.random.default_rng(seed)
    history = TrainLog()
    for epoch in range(epochs):
        total = 0.0
        count = 0
        for images, labels in iterate_batches(train, batch_size, rng, augment=baseline_aug):
            out = train_step(setting, model, (images, labels), rng, optimizer, step=history.steps)
            scheduler.step()
            history.steps += 1
            history.losses.append(out.loss)
            total += out.loss * len(labels)
            count += len(labels)
        history.epoch_losses.append(total / count)
        log.debug("epoch %d loss %.4f", epoch, history.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, history.epoch_losses[-1])
    return history


def predict(setting, model: ModelBundle, dataset: LabeledDataset, batch_size: int = 64) -> torch.Tensor:
    preds = []
    for images, _ in iterate_batches(dataset, batch_size):
        preds.append(infer(setting, model, images).argmax(dim=-1))
    return torch.cat(preds)


def evaluate(setting, model: ModelBundle, dataset: LabeledDataset, batch_size: int = 64) -> float:
    from calmix.bench import top1_accuracy

    return top1_accuracy(predict(setting, model, dataset, batch_size).tolist(), dataset.labels.tolist())
