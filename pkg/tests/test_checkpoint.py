import json

import numpy as np
import pytest
import torch

from calmix.checkpoint import load_checkpoint, load_model, read_manifest, save_checkpoint, state_checksum
from calmix.errors import CheckpointError, CorruptCheckpointError
from calmix.settings import build_model, infer

SPEC = {"setting": "CAL", "backbone": "tiny", "num_classes": 5, "image_size": 64, "num_maps": 4}


def _model(seed=0, **kw):
    args = {**SPEC, **kw}
    return build_model(args["setting"], args["backbone"], args["num_classes"], args["image_size"],
                       num_maps=args["num_maps"], seed=seed)


def _trained(seed=0):
    model = _model(seed)
    # move BN running stats away from their init values
    model.train()
    model.features(torch.rand(4, 3, 64, 64))
    return model


def test_round_trip_is_bit_exact(tmp_path):
    model = _trained()
    save_checkpoint(tmp_path / "ck", model, model_spec=SPEC, config_hash="abc", metrics={"top1": 0.5})
    other = _model(seed=9)
    assert state_checksum(other) != state_checksum(model)
    manifest = load_checkpoint(tmp_path / "ck", other)
    assert state_checksum(other) == state_checksum(model)
    assert manifest["config_hash"] == "abc" and manifest["metrics"] == {"top1": 0.5}
    for name, t in other.state_dict().items():
        assert t.dtype == model.state_dict()[name].dtype


def test_load_model_rebuilds_and_predicts_identically(tmp_path):
    model = _trained(1)
    save_checkpoint(tmp_path / "ck", model, model_spec=SPEC)
    back, _ = load_model(tmp_path / "ck")
    x = torch.rand(3, 3, 64, 64)
    assert torch.equal(infer("CAL", model, x), infer("CAL", back, x))
    nc, _ = load_model(tmp_path / "ck", setting="CAL_NC")
    assert torch.equal(infer("CAL_NC", nc, x), infer("CAL_NC", model, x))


def test_blobs_are_little_endian_float32(tmp_path):
    model = _model()
    save_checkpoint(tmp_path / "ck", model, model_spec=SPEC)
    manifest = read_manifest(tmp_path / "ck")
    entry = manifest["tensors"][0]
    raw = (tmp_path / "ck" / entry["file"]).read_bytes()
    array = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
    assert np.array_equal(array, model.state_dict()[entry["name"]].numpy())


def test_refuses_to_overwrite(tmp_path):
    model = _model()
    save_checkpoint(tmp_path / "ck", model)
    with pytest.raises(FileExistsError):
        save_checkpoint(tmp_path / "ck", model)
    save_checkpoint(tmp_path / "ck", model, overwrite=True)


def test_truncated_blob_is_corruption(tmp_path):
    save_checkpoint(tmp_path / "ck", _model(), model_spec=SPEC)
    blob = tmp_path / "ck" / "tensors" / "0000.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "ck", _model())


def test_flipped_byte_is_corruption(tmp_path):
    save_checkpoint(tmp_path / "ck", _model(), model_spec=SPEC)
    blob = tmp_path / "ck" / "tensors" / "0002.f32"
    data = bytearray(blob.read_bytes())
    data[0] ^= 0x01
    blob.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "ck", _model())


def test_edited_manifest_is_corruption(tmp_path):
    save_checkpoint(tmp_path / "ck", _model(), model_spec=SPEC)
    path = tmp_path / "ck" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["tensors"][0]["sha256"] = "0" * 64
    path.write_text(json.dumps(manifest))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(tmp_path / "ck", _model())


def test_shape_mismatch_names_tensor(tmp_path):
    save_checkpoint(tmp_path / "ck", _model(), model_spec=SPEC)
    with pytest.raises(CheckpointError, match="head.classifier.weight"):
        load_checkpoint(tmp_path / "ck", _model(num_classes=7))


def test_name_mismatch(tmp_path):
    save_checkpoint(tmp_path / "ck", _model(), model_spec=SPEC)
    with pytest.raises(CheckpointError, match="names differ"):
        load_checkpoint(tmp_path / "ck", _model(setting="FT"))


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path, _model())
