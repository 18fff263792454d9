import os
import warnings

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("dobkit", deadline=None, max_examples=50, derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dobkit"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _strict_numpy():
    # overflow or invalid arithmetic inside a test is a bug, not noise
    with np.errstate(over="raise", invalid="raise"):
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            yield


def pytest_configure(config):
    config._acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
