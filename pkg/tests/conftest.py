import numpy as np
import pytest

from calcmotion.simulate import PhantomSpec, make_phantom

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def phantom():
    return make_phantom(PhantomSpec(), 3)


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(PhantomSpec(dims=(32, 32, 6), n_lesions=(1, 2)), 5)
