import numpy as np
import pytest

from mbflow.convex import quadratic, weighted_l1
from mbflow.core import BatchSystem

ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def split_1d():
    """phi = u^2/2 + |u| as two batches {quadratic}, {l1} with pi = (1/2, 1/2)."""
    # sub-potentials carry the 1/pi factor: u^2 and 2|u|
    return BatchSystem.singletons([quadratic([[2.0]]), weighted_l1([2.0])], [0.5, 0.5])


def random_psd(rng, d, rank=None):
    G = rng.standard_normal((d, rank or d))
    return G @ G.T
