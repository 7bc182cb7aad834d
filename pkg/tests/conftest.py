import numpy as np
import pytest

from iwd import kernels
from iwd.data import generate_synthetic
from iwd.defense import TrainConfig, natural_train


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    if request.param == "numba" and not kernels.NUMBA_AVAILABLE:
        pytest.skip("numba not installed")
    monkeypatch.setattr(kernels, "USE_NUMBA", request.param == "numba")
    return request.param


@pytest.fixture(scope="session")
def desk():
    """Small desk suite: 4 texture classes, 12x12, and a natural MLP."""
    train = generate_synthetic(0, n_classes=4, per_class=100, contrast=0.3)
    test = generate_synthetic(0, n_classes=4, per_class=10, contrast=0.3, split="test")
    model = natural_train(train, TrainConfig(epochs=20, seed=0))
    return train, test, model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
