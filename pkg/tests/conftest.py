import numpy as np
import pytest

from sparsetrain.nn import NetworkConfig, SparseNetwork
from sparsetrain.sparse import SparseWeights

# filled by test_acceptance.py: (criterion id, passed, detail)
ACCEPTANCE_RESULTS = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} [{criterion}] {detail}"
    ACCEPTANCE_RESULTS.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)


def random_sparse(rng, rows, cols, density, dtype=np.float64):
    mask = rng.random((rows, cols)) < density
    dense = np.where(mask, rng.standard_normal((rows, cols)), 0.0)
    # keep the mask exact: a drawn zero would silently vanish
    dense[mask & (dense == 0)] = 0.5
    return SparseWeights.from_dense(dense.astype(dtype))


def random_network(rng, sizes, density, activation="relu", alpha=0.5, loss="softmax_cross_entropy",
                   dropout=0.0, dtype="float64"):
    cfg = NetworkConfig(
        sizes, epsilon=1.0, activation=activation, alpha=alpha, dropout_rate=dropout, loss=loss, dtype=dtype
    )
    layers = [random_sparse(rng, a, b, density, np.dtype(dtype)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [rng.standard_normal(b).astype(dtype) * 0.1 for b in sizes[1:]]
    return SparseNetwork(layers, biases, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
