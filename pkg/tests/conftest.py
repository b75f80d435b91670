import numpy as np
import pytest

from datkit import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# One line per acceptance criterion, appended by test_acceptance and echoed at the end.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
