"""Experiment configuration: a versioned JSON document, strictly validated."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from calmix.errors import ConfigError
from calmix.settings import AugmentParams, TrEvSetting

__all__ = ["CONFIG_VERSION", "ExperimentConfig", "load_config"]

CONFIG_VERSION = 1

# fields that never change what a run computes
_RUNTIME_ONLY = {"output_dir", "workers"}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_root: str
    manifest: str = "manifest.csv"
    dataset_name: str = ""
    backbone: str = "tiny"
    setting: str = "FT"
    image_size: int = 224
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    num_seeds: int = 3
    num_maps: int = 32
    crop_threshold: float = 0.5
    mask_threshold: float = 0.5
    crop_padding: float = 0.1
    lambda_cf: float = 1.0
    num_cf_samples: int = 1
    holdout_fraction: float = 0.1
    baseline_aug: bool = True
    momentum: float = 0.9
    weight_decay: float = 0.0
    throughput_batch_size: int = 32
    throughput_samples: int = 512
    warmup_batches: int = 2
    warmup_seconds: float = 0.0
    backbone_kwargs: dict = field(default_factory=dict)
    output_dir: str = "runs"
    workers: int = 1
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"version: unsupported config version {self.version!r}")
        if not self.dataset_root:
            raise ConfigError("dataset_root: must be set")
        object.__setattr__(self, "setting", self._setting_value())
        if not 64 <= self.image_size <= 512:
            raise ConfigError(f"image_size: must lie in [64, 512], got {self.image_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate}")
        for name in ("batch_size", "epochs", "num_maps", "num_cf_samples", "throughput_batch_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.num_seeds < 2:
            raise ConfigError(f"num_seeds: multi-seed runs need >= 2 seeds, got {self.num_seeds}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction: must lie in (0, 1), got {self.holdout_fraction}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum: must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be >= 0, got {self.weight_decay}")
        if self.warmup_batches < 0:
            raise ConfigError(f"warmup_batches: must be >= 0, got {self.warmup_batches}")
        if self.warmup_seconds < 0:
            raise ConfigError(f"warmup_seconds: must be >= 0, got {self.warmup_seconds}")
        if self.throughput_samples < self.throughput_batch_size * (self.warmup_batches + 1):
            raise ConfigError("throughput_samples: too few for the batch size and warmup batches")
        try:
            self.augment_params()
        except ConfigError as exc:
            raise ConfigError(str(exc)) from None

    def _setting_value(self) -> str:
        try:
            return TrEvSetting.parse(self.setting).value
        except ConfigError as exc:
            raise ConfigError(f"setting: {exc}") from None

    @property
    def trev(self) -> TrEvSetting:
        return TrEvSetting(self.setting)

    @property
    def dataset(self) -> str:
        return self.dataset_name or Path(self.dataset_root).name

    @property
    def manifest_path(self) -> Path:
        return Path(self.dataset_root) / self.manifest

    @property
    def results_path(self) -> Path:
        return Path(self.output_dir) / "results.jsonl"

    def augment_params(self) -> AugmentParams:
        return AugmentParams(
            crop_threshold=self.crop_threshold,
            mask_threshold=self.mask_threshold,
            crop_padding=self.crop_padding,
            lambda_cf=self.lambda_cf,
            num_cf_samples=self.num_cf_samples,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        if "version" not in data:
            raise ConfigError("version: missing")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def _hash(self, exclude: set[str]) -> str:
        data = {k: v for k, v in self.to_dict().items() if k not in exclude | _RUNTIME_ONLY}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def run_hash(self) -> str:
        """Identifies one run, seed included."""
        return self._hash(set())

    @property
    def config_id(self) -> str:
        """Shared by runs that differ only in seed."""
        return self._hash({"seed"})

    @property
    def sweep_id(self) -> str:
        """Shared by runs that differ only in seed or learning rate."""
        return self._hash({"seed", "learning_rate"})


def load_config(path, env=None) -> ExperimentConfig:
    """Read a JSON config; ``CALMIX_OUT`` in the environment overrides output_dir."""
    env = os.environ if env is None else env
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    config = ExperimentConfig.from_json(text)
    if env.get("CALMIX_OUT"):
        config = config.replace(output_dir=env["CALMIX_OUT"])
    return config
