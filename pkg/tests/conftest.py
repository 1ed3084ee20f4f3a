import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def skew(a):
    return 0.5 * (a - a.T)


def tangency(y, d):
    m = y.T @ d
    return np.linalg.norm(m + m.T)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
