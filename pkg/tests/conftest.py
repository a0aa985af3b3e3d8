import numpy as np
import pytest

from morphnas.data import make_initial_model, make_synthetic
from morphnas.train import TrainConfig, sgdr_train


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic(n_per_class=30, image_size=16, seed=0)


@pytest.fixture(scope="session")
def pretrained(small_data):
    """Initial model after two quick epochs, so batch-norm statistics are non-trivial."""
    g = make_initial_model((3, 16, 16), channels=8, seed=0)
    sgdr_train(g, small_data.train, TrainConfig(epochs=2, seed=0))
    return g


@pytest.fixture
def model(pretrained):
    return pretrained.clone()


@pytest.fixture
def probe():
    return np.random.default_rng(123).standard_normal((16, 3, 16, 16)).astype(np.float32)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
