import numpy as np
import pytest

from hdmm.workload import Schema

#: Lines reported by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def prefix_matrix(n):
    return np.tril(np.ones((n, n)))


def allrange_matrix(n):
    rows = []
    for i in range(n):
        for j in range(i, n):
            r = np.zeros(n)
            r[i:j + 1] = 1
            rows.append(r)
    return np.array(rows)


def schema(*sizes):
    return Schema.from_sizes(sizes)
