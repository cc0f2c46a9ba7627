import numpy as np
import pytest

from dgmae.graphcore import Graph


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_node():
    return Graph.from_edges(2, [(0, 1)])


@pytest.fixture
def triangle():
    return Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
