import numpy as np
import pytest

from amam.tensor import Tensor

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def randt(rng):
    def make(*shape, grad=False):
        return Tensor(rng.standard_normal(shape), requires_grad=grad)
    return make


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
