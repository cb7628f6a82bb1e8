import numpy as np
import pytest

from fbdsdej.coefficients import builtin
from fbdsdej.noise import TimeGrid, sample_noise
from fbdsdej.spaces import MarkSpace, ProblemSpec


@pytest.fixture(scope="session")
def example1():
    coeffs, _, _ = builtin("example1")
    return coeffs


@pytest.fixture(scope="session")
def example2():
    return builtin("example2")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_noise():
    spec = ProblemSpec(1, 1, 1, 1.0, markspace=MarkSpace((1.0,)))
    return sample_noise(7, 2000, TimeGrid(1.0, 20), spec)


@pytest.fixture(scope="session")
def example1_noise(example1):
    return sample_noise(11, 4000, TimeGrid(1.0, 50), example1.spec)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
