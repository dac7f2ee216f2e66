import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import ACCEPTANCE_LINES  # noqa: E402
from mvhomog import ModelSpec, instantiate  # noqa: E402


@pytest.fixture(scope="session")
def linear():
    return instantiate(ModelSpec("linear-ou"))


@pytest.fixture(scope="session")
def nonlinear():
    return instantiate(ModelSpec("nonlinear-test"))


@pytest.fixture(scope="session")
def zero_k():
    return instantiate(ModelSpec("zero-k"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
