import numpy as np
import pytest

from wmattack import world
from wmattack.alignment import FrozenEmbedding
from wmattack.denoiser import world_mixture
from wmattack.schedule import make_schedule


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(25, 1e-4, 0.02)


@pytest.fixture(scope="session")
def mixture():
    return world_mixture()


@pytest.fixture(scope="session")
def emb():
    return FrozenEmbedding.from_seed(0)


@pytest.fixture(scope="session")
def videos():
    return world.rollout_dataset(12, 4, 123)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.LINES):
            terminalreporter.write_line(test_acceptance.LINES[n])
