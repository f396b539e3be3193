import pytest
import torch

from aegis.data import make_toy
from aegis.model import TappedCNN, TrainConfig, freeze, train_classifier


@pytest.fixture(scope="session")
def toy_small():
    return make_toy(600, seed=11)


@pytest.fixture(scope="session")
def tiny_model(toy_small):
    """Default-width CNN trained briefly on 600 toy images (test accuracy near 1)."""
    torch.set_num_threads(1)
    m = train_classifier(toy_small, TrainConfig(epochs=5, batch_size=32))
    return freeze(m)


@pytest.fixture
def random_model():
    torch.manual_seed(0)
    return freeze(TappedCNN(widths=(4, 4, 8, 8), image_size=16))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
