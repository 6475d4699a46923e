"""Shared fixtures."""

import numpy as np
import pytest

from dualq.envs import make_random_env


@pytest.fixture
def small_env():
    return make_random_env(5, 8, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
