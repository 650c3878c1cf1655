import numpy as np
import pytest

from fairgmnn.core_math import CSR, rng_stream
from fairgmnn.graph_data import NodeData, SparseGraph


def random_graph(n, p, rng):
    iu, ju = np.triu_indices(n, k=1)
    hit = rng.random(iu.size) < p
    return SparseGraph.from_edges(n, iu[hit], ju[hit])


def random_sparse(rows, cols, density, rng, positive=False):
    dense = rng.random((rows, cols)) < density
    vals = rng.random((rows, cols)) + 0.1 if positive else rng.normal(size=(rows, cols))
    return CSR.from_dense(np.where(dense, vals, 0.0))


def random_node_data(n, k, f, rng, name="toy"):
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    bits = rng.random((n, f)) < 0.3
    bits[np.arange(n), rng.integers(0, f, n)] = True
    return NodeData.from_binary(CSR.from_dense(bits.astype(float)), labels, k, name)


@pytest.fixture
def rng():
    return rng_stream(12345)


ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail=""):
    ACCEPTANCE_LINES.append("criterion %s [%s] %s%s" % (number, "PASS" if ok else "FAIL", name,
                                                        " :: " + detail if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
