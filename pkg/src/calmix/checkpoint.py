"""Checkpoints as a JSON manifest plus one raw float32 blob per tensor.

Layout::

    <dir>/manifest.json
    <dir>/tensors/0000.f32
    <dir>/tensors/0001.f32
    ...

Blobs are little-endian float32, C order. The manifest lists name, shape,
original dtype, byte count and SHA-256 of every blob, and a hash over that
list so an edited manifest is caught too.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from calmix.errors import CheckpointError, CorruptCheckpointError
from calmix.settings import AugmentParams, ModelBundle, build_model

__all__ = ["load_checkpoint", "load_model", "read_manifest", "save_checkpoint", "state_checksum"]

FORMAT = "calmix-checkpoint"
VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _entries_hash(entries: list[dict]) -> str:
    return _sha256(json.dumps(entries, sort_keys=True).encode())


def state_checksum(model: torch.nn.Module) -> str:
    """SHA-256 over every state tensor's name, shape and raw bytes."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path,
    model: ModelBundle,
    *,
    model_spec: Optional[dict] = None,
    config_hash: str = "",
    metrics: Optional[dict] = None,
    overwrite: bool = False,
) -> Path:
    """Write ``model``'s state. ``model_spec`` holds the :func:`build_model`
    arguments needed to rebuild it with :func:`load_model`."""
    path = Path(path)
    if path.exists():
        if not overwrite:
            raise FileExistsError(f"{path} exists; pass overwrite=True to replace it")
        shutil.rmtree(path)
    (path / "tensors").mkdir(parents=True)
    entries = []
    for i, (name, tensor) in enumerate(model.state_dict().items()):
        t = tensor.detach().cpu()
        data = np.ascontiguousarray(t.numpy().astype(BLOB_DTYPE, copy=False)).tobytes()
        rel = f"tensors/{i:04d}.f32"
        (path / rel).write_bytes(data)
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": str(t.dtype).removeprefix("torch."),
                "file": rel,
                "nbytes": len(data),
                "sha256": _sha256(data),
            }
        )
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config_hash": config_hash,
        "model": model_spec or {},
        "params": asdict(model.params),
        "metrics": metrics or {},
        "tensors": entries,
        "tensors_hash": _entries_hash(entries),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"{path}/manifest.json: {exc}") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    if _entries_hash(manifest["tensors"]) != manifest.get("tensors_hash"):
        raise CorruptCheckpointError(f"{path}: manifest tensor table hash mismatch")
    return manifest


def load_checkpoint(path, model: ModelBundle) -> dict:
    """Verify every blob and copy it into ``model``. Returns the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    expected = model.state_dict()
    stored = {e["name"]: e for e in manifest["tensors"]}
    missing = sorted(set(expected) - set(stored))
    unexpected = sorted(set(stored) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"{path}: tensor names differ (missing {missing}, unexpected {unexpected})")
    loaded = {}
    for name, target in expected.items():
        entry = stored[name]
        if list(target.shape) != entry["shape"]:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tuple(entry['shape'])}, model expects {tuple(target.shape)}"
            )
        blob = path / entry["file"]
        try:
            data = blob.read_bytes()
        except FileNotFoundError:
            raise CorruptCheckpointError(f"{path}: blob for {name!r} is missing") from None
        if len(data) != entry["nbytes"] or _sha256(data) != entry["sha256"]:
            raise CorruptCheckpointError(f"{path}: blob for {name!r} failed its integrity check")
        array = np.frombuffer(data, dtype=BLOB_DTYPE).reshape(entry["shape"])
        loaded[name] = torch.from_numpy(array.copy()).to(target.dtype)
    model.load_state_dict(loaded)
    if manifest.get("params"):
        model.params = AugmentParams(**manifest["params"])
    return manifest


def load_model(path, setting=None) -> tuple[ModelBundle, dict]:
    """Rebuild a model from the manifest's ``model`` spec and load it.

    ``setting`` may override the stored one within the same head family,
    e.g. evaluating a CAL checkpoint as CAL_NC.
    """
    manifest = read_manifest(path)
    spec = dict(manifest["model"])
    if not spec:
        raise CheckpointError(f"{path}: manifest carries no model spec")
    if setting is not None:
        spec["setting"] = setting
    model = build_model(
        spec["setting"],
        spec["backbone"],
        spec["num_classes"],
        spec["image_size"],
        num_maps=spec.get("num_maps", 32),
        backbone_kwargs=spec.get("backbone_kwargs"),
    )
    load_checkpoint(path, model)
    return model, manifest
