import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.dataset import SlicePair  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end phantom training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MMCCD_OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("MMCCD_DEVICE", "cpu")
    monkeypatch.delenv("MMCCD_NUM_WORKERS", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_pairs():
    """Four anomaly-free 16x16 training pairs with y = 1 - x inside a square."""
    gen = np.random.default_rng(7)
    pairs = []
    for i in range(4):
        x = np.zeros((16, 16), dtype=np.float32)
        x[3:13, 3:13] = gen.uniform(0.2, 0.8, size=(10, 10)).astype(np.float32)
        y = np.where(x > 0, 1.0 - x, 0.0).astype(np.float32)
        pairs.append(SlicePair(x, y, np.zeros((16, 16), dtype=bool), f"s{i}", 0, "train"))
    return pairs


@pytest.fixture
def float64():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
