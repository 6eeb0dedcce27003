import numpy as np
import pytest
import torch
import torch.nn.functional as F

from calmix.augment import rescale_map
from calmix.backbones import trainable_parameter_count
from calmix.errors import ConfigError, TrainingDiverged
from calmix.settings import (
    InferencePath,
    TrEvSetting,
    augment_views,
    build_model,
    count_backbone_passes,
    infer,
    make_optimizer,
    reset_backbone_passes,
    train_step,
)

ALL = list(TrEvSetting)


def _batch(n=4, size=64, classes=10, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g), torch.arange(n) % classes


def test_setting_parsing_and_contract():
    assert TrEvSetting.parse("cal-nc") is TrEvSetting.CAL_NC
    assert TrEvSetting.parse("CALMix_NC") is TrEvSetting.CALMIX_NC
    with pytest.raises(ConfigError):
        TrEvSetting.parse("CAL2")
    two_pass = {s for s in ALL if s.inference_path is InferencePath.TWO_PASS}
    assert two_pass == {TrEvSetting.CAL, TrEvSetting.CALMIX}
    assert [s for s in ALL if s.frozen_backbone] == [TrEvSetting.FZ]


def test_fz_trains_head_only():
    model = build_model("FZ", "tiny", 10, 64)
    head = sum(p.numel() for p in model.head.parameters())
    assert trainable_parameter_count(model) == head == 128 * 10 + 10


def test_ft_trains_everything():
    model = build_model("FT", "tiny", 10, 64)
    total = sum(p.numel() for p in model.parameters())
    assert trainable_parameter_count(model) == total
    assert total == sum(p.numel() for p in model.backbone.parameters()) + 128 * 10 + 10


def test_cal_head_width_is_maps_times_channels():
    model = build_model("CAL", "tiny", 10, 64)
    assert model.head.input_width == 32 * model.backbone.feature_channels == 4096


def test_build_model_errors():
    with pytest.raises(ConfigError):
        build_model("FT", "no-such-net", 10, 64)
    with pytest.raises(ConfigError):
        build_model("FT", "tiny", 1, 64)


def test_build_model_seed_is_reproducible():
    a = build_model("CAL", "tiny", 5, 64, seed=3)
    b = build_model("CAL_NC", "tiny", 5, 64, seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_fz_step_leaves_backbone_bit_identical():
    model = build_model("FZ", "tiny", 10, 64, seed=0)
    before = {k: v.clone() for k, v in model.backbone.state_dict().items()}
    opt, _ = make_optimizer(model, 0.1, 10)
    for _ in range(3):
        train_step("FZ", model, _batch(), np.random.default_rng(0), opt)
    for k, v in model.backbone.state_dict().items():
        assert torch.equal(v, before[k]), k


@pytest.mark.parametrize("setting", ALL)
def test_train_step_pass_count(setting):
    model = build_model(setting, "tiny", 10, 64, seed=0)
    opt, _ = make_optimizer(model, 0.01, 10)
    reset_backbone_passes(model)
    out = train_step(setting, model, _batch(4), np.random.default_rng(0), opt)
    per_sample = 2 if setting.uses_attention else 1
    assert out.pass_count == count_backbone_passes(model) == 4 * per_sample
    assert np.isfinite(out.loss)


@pytest.mark.parametrize("setting", ALL)
def test_inference_pass_count(setting):
    model = build_model(setting, "tiny", 10, 64, seed=0)
    reset_backbone_passes(model)
    infer(setting, model, _batch(8)[0])
    assert count_backbone_passes(model) == 8 * setting.inference_path.value
    assert model.backbone.calls == setting.inference_path.value


def test_count_after_reset_and_ft_batch():
    model = build_model("FT", "tiny", 10, 64)
    reset_backbone_passes(model)
    assert count_backbone_passes(model) == 0
    infer("FT", model, _batch(5)[0])
    assert model.backbone.calls == 1 and count_backbone_passes(model) == 5


@pytest.mark.parametrize("setting", ALL)
def test_probabilities_are_normalized_and_deterministic(setting):
    model = build_model(setting, "tiny", 10, 64, seed=1)
    images = _batch(6)[0]
    p1 = infer(setting, model, images)
    p2 = infer(setting, model, images)
    assert torch.equal(p1, p2)
    assert (p1 >= 0).all()
    assert torch.allclose(p1.sum(dim=1), torch.ones(6), atol=1e-6)


def test_two_pass_fusion_matches_independent_recompute():
    model = build_model("CAL", "tiny", 10, 64, seed=2).eval()
    images = _batch(5)[0]
    probs = infer("CAL", model, images)

    with torch.no_grad():
        feats = model.backbone((images - model.mean) / model.std)
        raw_logits, attention = model.head(feats)
        crops = []
        for image, maps in zip(images, attention):
            idx = int(maps.sum(dim=(1, 2)).argmax())
            up = F.interpolate(maps[idx][None, None], size=(64, 64), mode="bilinear", align_corners=False)[0, 0]
            up = rescale_map(up)
            hits = np.argwhere(up.numpy() >= 0.5)
            r0, c0 = hits.min(axis=0)
            r1, c1 = hits.max(axis=0) + 1
            pad = int(0.1 * 64)
            r0, c0 = max(r0 - pad, 0), max(c0 - pad, 0)
            r1, c1 = min(r1 + pad, 64), min(c1 + pad, 64)
            patch = image[:, r0:r1, c0:c1]
            crops.append(F.interpolate(patch[None], size=(64, 64), mode="bilinear", align_corners=False)[0].clamp(0, 1))
        crop_logits, _ = model.head(model.backbone((torch.stack(crops) - model.mean) / model.std))
    expected = (F.softmax(raw_logits, -1) + F.softmax(crop_logits, -1)) / 2
    assert torch.allclose(probs, expected, atol=1e-6)


def test_nc_inference_is_raw_branch_only():
    model = build_model("CAL_NC", "tiny", 10, 64, seed=2)
    images = _batch(3)[0]
    probs, branches = infer("CAL_NC", model, images, return_branches=True)
    assert set(branches) == {"raw"}
    assert torch.allclose(probs, F.softmax(branches["raw"], -1))


def test_setting_model_mismatch():
    cal = build_model("CAL", "tiny", 10, 64)
    ft = build_model("FT", "tiny", 10, 64)
    with pytest.raises(ConfigError):
        infer("FT", cal, _batch()[0])
    with pytest.raises(ConfigError):
        infer("CALMIX", ft, _batch()[0])


def test_train_step_input_errors():
    model = build_model("FT", "tiny", 10, 64)
    opt, _ = make_optimizer(model, 0.01, 1)
    images, _ = _batch()
    with pytest.raises(ValueError):
        train_step("FT", model, (images, torch.tensor([0, 1, 2, 10])), np.random.default_rng(0), opt)
    with pytest.raises(ConfigError):
        train_step("FT", model, _batch(size=32), np.random.default_rng(0), opt)


def test_divergence_is_reported():
    model = build_model("FT", "tiny", 10, 64)
    with torch.no_grad():
        model.head.fc.weight.fill_(float("nan"))
    opt, _ = make_optimizer(model, 0.01, 1)
    with pytest.raises(TrainingDiverged):
        train_step("FT", model, _batch(), np.random.default_rng(0), opt)


def test_cal_and_cal_nc_share_training_trajectory():
    batches = [_batch(4, seed=s) for s in range(5)]
    states = []
    for setting in ("CAL", "CAL_NC"):
        model = build_model(setting, "tiny", 10, 64, seed=11)
        opt, _ = make_optimizer(model, 0.05, 5)
        g = np.random.default_rng(4)
        for b in batches:
            train_step(setting, model, b, g, opt)
        states.append(model.state_dict())
    for k in states[0]:
        assert torch.equal(states[0][k], states[1][k]), k


def test_calmix_views_use_partners_and_fallback():
    images, _ = _batch(6)
    labels = torch.tensor([0, 0, 1, 1, 2, 3])
    attention = torch.rand(6, 4, 4, 4)
    model = build_model("CALMIX", "tiny", 4, 64)
    seen = set()
    g = np.random.default_rng(0)
    for _ in range(30):
        views, ops = augment_views(TrEvSetting.CALMIX, images, labels, attention, g, model.params)
        assert views.shape == images.shape
        assert ops[4] != "mix" and ops[5] != "mix"
        seen.update(ops)
    assert seen == {"crop", "mask", "mix"}
    _, cal_ops = augment_views(TrEvSetting.CAL, images, labels, attention, g, model.params)
    assert set(cal_ops) <= {"crop", "mask"}


def _separable(n, size=32, seed=0):
    g = torch.Generator().manual_seed(seed)
    labels = torch.arange(n) % 2
    base = torch.where(labels[:, None, None, None] == 1, 0.75, 0.25)
    images = (base + 0.05 * torch.randn(n, 3, size, size, generator=g)).clamp(0, 1)
    return images, labels


@pytest.mark.parametrize("setting", ALL)
def test_loss_decreases_on_separable_data(setting):
    """50 steps on bright-vs-dark images; median over three seeds."""
    images, labels = _separable(64)
    improved = []
    for seed in range(3):
        model = build_model(setting, "tiny", 2, 32, num_maps=8, seed=seed)
        opt, sched = make_optimizer(model, 0.01, 50)
        g = np.random.default_rng(seed)
        losses = []
        for step in range(50):
            idx = torch.as_tensor(g.choice(64, 16, replace=False))
            losses.append(train_step(setting, model, (images[idx], labels[idx]), g, opt, step).loss)
            sched.step()
        improved.append(np.mean(losses[:5]) - np.mean(losses[-5:]))
    assert np.median(improved) > 0
