import numpy as np
import pytest

from scno.oracle import generate_dataset

TOY_TRAIN = 200
TOY_HELD_OUT = 50


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_darcy():
    """250 Darcy samples on 32x32: the first 200 train, the rest are held out."""
    return generate_dataset("darcy", TOY_TRAIN + TOY_HELD_OUT, 32, seed=1)


@pytest.fixture(scope="session")
def tiny_darcy():
    return generate_dataset("darcy", 12, 16, seed=3)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
