import numpy as np
import pytest

from qaalab.core import LayerGraph, Linear
from qaalab.harness.data import synth_dataset
from qaalab.training import TrainConfig, qat_train, train_standard


# verdict lines of the acceptance module, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_model(weight, bias=None, dtype=np.float64):
    """Single linear layer graph with the given weight matrix [out, in]."""
    weight = np.asarray(weight, dtype=dtype)
    layer = Linear(weight.shape[1], weight.shape[0])
    layer.params["weight"] = weight.copy()
    layer.params["bias"] = (np.zeros(weight.shape[0]) if bias is None else np.asarray(bias)).astype(dtype)
    return LayerGraph("linear", (weight.shape[1],), [layer], weight.shape[0])


@pytest.fixture(scope="session")
def blobs():
    train = synth_dataset(10, 3000, 8, seed=3, amplitude=0.2)
    test = synth_dataset(10, 200, 8, seed=1003, amplitude=0.2, pattern_seed=3, split="test")
    return train, test


@pytest.fixture(scope="session")
def small_zoo(blobs):
    """A 32-bit and a warm-started 2-bit ConvNet-A."""
    train, _ = blobs
    m32 = train_standard("convnet_a", train, TrainConfig(epochs=3, seed=0))
    m2 = qat_train("convnet_a", train, TrainConfig(epochs=3, seed=0, bits=2), init=m32)
    return m32, m2
