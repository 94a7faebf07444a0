import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def fd_directional(f, x, d, step=1e-5):
    return (f(x + step * d) - f(x - step * d)) / (2 * step)


def rel_err(a, b):
    return abs(a - b) / (abs(b) + 1e-12)


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
