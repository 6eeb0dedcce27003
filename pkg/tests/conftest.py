import time

import numpy as np
import pytest
import torch

from calmix.backbones import BackboneAdapter, register_backbone, list_backbones
from calmix.datasets import generate_synthetic_fgir, load_image_folder

torch.set_num_threads(1)


class SleepBackbone(BackboneAdapter):
    """Fixed-cost stand-in: each batched call takes ``delay`` seconds."""

    def __init__(self, delay: float = 0.010, channels: int = 4, reduction: int = 16):
        super().__init__("stub-sleep", channels, reduction)
        self.delay = delay
        self.scale = torch.nn.Parameter(torch.ones(()))

    def extract(self, images):
        deadline = time.perf_counter() + self.delay
        b, _, h, w = images.shape
        hf, wf = self.output_size(h, w)
        r = self.reduction
        out = self.scale * images[:, :1, ::r, ::r].abs().expand(b, self.feature_channels, hf, wf)
        time.sleep(max(0.0, deadline - time.perf_counter()))
        return out


if "stub-sleep" not in list_backbones():
    register_backbone("stub-sleep", SleepBackbone)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_small(tmp_path_factory):
    """8 classes x 50 samples at 64 px: 320 train / 80 test."""
    root = tmp_path_factory.mktemp("synthetic_small")
    manifest = generate_synthetic_fgir(root, 8, 50, 64, seed=7)
    return root, manifest


@pytest.fixture(scope="session")
def synthetic_small_data(synthetic_small):
    root, manifest = synthetic_small
    return load_image_folder(root, manifest, 64)


@pytest.fixture(autouse=True)
def _isolated_lock(tmp_path, monkeypatch):
    monkeypatch.setenv("CALMIX_LOCK", str(tmp_path / "throughput.lock"))
    monkeypatch.delenv("CALMIX_OUT", raising=False)


_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        if report.outcome != "passed" or name not in _ACCEPTANCE:
            _ACCEPTANCE[name] = report.outcome.upper()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"{'PASS' if outcome == 'PASSED' else 'FAIL'}  {name}")
