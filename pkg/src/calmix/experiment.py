"""Single runs and the two-stage protocol (LR search, then seeds)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

from calmix.bench import (
    LR_GRID,
    MetricRecord,
    append_jsonl,
    lr_search,
    measure_throughput,
    measure_train_time,
    multi_seed_aggregate,
    read_jsonl,
    throughput_lock,
)
from calmix.config import ExperimentConfig
from calmix.datasets import LabeledDataset, load_image_folder, make_holdout_split, read_manifest
from calmix.errors import ConfigError
from calmix.settings import ModelBundle, build_model
from calmix.training import TrainLog, evaluate, fit

log = logging.getLogger(__name__)

__all__ = [
    "RunResult",
    "holdout_accuracy",
    "load_dataset",
    "model_spec",
    "run_experiment",
    "sweep_lr",
    "sweep_seeds",
]


@dataclass
class RunResult:
    record: MetricRecord
    model: ModelBundle
    history: TrainLog


def load_dataset(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    manifest = read_manifest(config.manifest_path)
    return load_image_folder(config.dataset_root, manifest, config.image_size, workers=config.workers)


def model_spec(config: ExperimentConfig, num_classes: int) -> dict:
    return {
        "setting": config.setting,
        "backbone": config.backbone,
        "num_classes": num_classes,
        "image_size": config.image_size,
        "num_maps": config.num_maps,
        "backbone_kwargs": dict(config.backbone_kwargs),
    }


def _build(config: ExperimentConfig, num_classes: int) -> ModelBundle:
    return build_model(
        config.setting,
        config.backbone,
        num_classes,
        config.image_size,
        num_maps=config.num_maps,
        params=config.augment_params(),
        seed=config.seed,
        backbone_kwargs=config.backbone_kwargs,
    )


def _fit(config: ExperimentConfig, model: ModelBundle, train: LabeledDataset) -> TrainLog:
    return fit(
        config.setting,
        model,
        train,
        lr=config.learning_rate,
        epochs=config.epochs,
        batch_size=config.batch_size,
        seed=config.seed,
        baseline_aug=config.baseline_aug,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def run_experiment(
    config: ExperimentConfig,
    data: Optional[tuple[LabeledDataset, LabeledDataset]] = None,
    wait_for_lock: bool = True,
) -> RunResult:
    """Train, score on the test split and time batched inference.

    The training time covers data loading when ``data`` is not supplied.
    """
    state: dict = {}

    def run():
        train, test = data if data is not None else load_dataset(config)
        model = _build(config, train.num_classes)
        state["history"] = _fit(config, model, train)
        state["model"], state["test"] = model, test

    minutes, _ = measure_train_time(run)
    model, test = state["model"], state["test"]
    top1 = evaluate(config.setting, model, test)
    with throughput_lock(wait=wait_for_lock):
        throughput = measure_throughput(
            model,
            config.setting,
            config.throughput_batch_size,
            config.throughput_samples,
            config.warmup_batches,
            images=test.images if len(test) else None,
            warmup_seconds=config.warmup_seconds,
        )
    record = MetricRecord(
        top1=top1,
        train_time_min=minutes,
        throughput_sps=throughput,
        config_id=config.config_id,
        seed=config.seed,
        dataset=config.dataset,
        backbone=config.backbone,
        setting=config.setting,
        image_size=config.image_size,
        learning_rate=config.learning_rate,
    )
    return RunResult(record, model, state["history"])


def holdout_accuracy(config: ExperimentConfig, train: Optional[LabeledDataset] = None) -> float:
    """Train on the training split minus a stratified holdout; score on the holdout."""
    if train is None:
        train, _ = load_dataset(config)
    fit_part, held = make_holdout_split(train, config.holdout_fraction, config.seed)
    model = _build(config, train.num_classes)
    _fit(config, model, fit_part)
    return evaluate(config.setting, model, held)


def sweep_lr(
    config: ExperimentConfig,
    evaluator: Optional[Callable[[ExperimentConfig], float]] = None,
    lrs=LR_GRID,
) -> float:
    """Stage one: one holdout run per learning rate, then the selection record."""
    if evaluator is None:
        train, _ = load_dataset(config)
        evaluator = lambda cfg: holdout_accuracy(cfg, train)  # noqa: E731
    best, trials = lr_search(lambda lr: evaluator(config.replace(learning_rate=lr)), lrs)
    for t in trials:
        append_jsonl(
            config.results_path,
            {
                "kind": "lr_trial",
                "sweep_id": config.sweep_id,
                "dataset": config.dataset,
                "backbone": config.backbone,
                "setting": config.setting,
                "image_size": config.image_size,
                "seed": config.seed,
                "learning_rate": t.learning_rate,
                "holdout_top1": t.accuracy,
                "diverged": t.diverged,
            },
        )
    append_jsonl(
        config.results_path,
        {
            "kind": "lr_selection",
            "sweep_id": config.sweep_id,
            "dataset": config.dataset,
            "backbone": config.backbone,
            "setting": config.setting,
            "image_size": config.image_size,
            "learning_rate": best,
            "candidates": [t.learning_rate for t in trials],
        },
    )
    log.info("selected lr=%g for %s/%s/%s", best, config.dataset, config.backbone, config.setting)
    return best


def selected_lr(config: ExperimentConfig) -> float:
    if not config.results_path.exists():
        raise ConfigError(f"no results at {config.results_path}; run the lr stage first")
    picks = [r for r in read_jsonl(config.results_path) if r.get("kind") == "lr_selection" and r.get("sweep_id") == config.sweep_id]
    if not picks:
        raise ConfigError("no lr_selection record for this configuration; run the lr stage first")
    return float(picks[-1]["learning_rate"])


def sweep_seeds(
    config: ExperimentConfig,
    runner: Optional[Callable[[ExperimentConfig], MetricRecord]] = None,
) -> dict:
    """Stage two: ``num_seeds`` runs at the selected LR, then their aggregate."""
    lr = selected_lr(config)
    if runner is None:
        data = load_dataset(config)
        runner = lambda cfg: run_experiment(cfg, data).record  # noqa: E731
    records = []
    for i in range(config.num_seeds):
        cfg = config.replace(learning_rate=lr, seed=config.seed + i)
        record = runner(cfg)
        append_jsonl(config.results_path, record.to_dict())
        records.append(record)
    stats = multi_seed_aggregate(records)
    aggregate = {
        "kind": "aggregate",
        "config_id": records[0].config_id,
        "dataset": config.dataset,
        "backbone": config.backbone,
        "setting": config.setting,
        "image_size": config.image_size,
        "learning_rate": lr,
        "seeds": [r.seed for r in records],
        **{f"{axis}_mean": m for axis, (m, _) in stats.items()},
        **{f"{axis}_std": s for axis, (_, s) in stats.items()},
    }
    append_jsonl(config.results_path, aggregate)
    return aggregate
