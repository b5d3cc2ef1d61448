import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fernnet import kernels  # noqa: E402


@pytest.fixture(params=kernels.available())
def backend(request):
    """Each available fern kernel backend, made active for the duration of the test."""
    previous = kernels.backend_name()
    kernels.set_backend(request.param)
    yield kernels.BACKENDS[request.param]
    kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance_line():
    """Record the one-line verdict of an acceptance criterion for the terminal summary."""
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
