import numpy as np
import pytest

from surrojive.data_model import Dataset, assign_folds


def make_dataset(K, n, d, L, seed=0, pi_scale=1.0, noise=1.0, beta=None):
    """Small linear-model dataset with well-separated cell effects."""
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(d) if beta is None else np.asarray(beta, dtype=float)
    pi = pi_scale * rng.standard_normal((K, d))
    cells = np.repeat(np.arange(1, K + 1), n)
    u = rng.standard_normal(K * n)
    s = pi[cells - 1] + noise * (rng.standard_normal((K * n, d)) + 0.5 * u[:, None])
    y = s @ beta + noise * (u + rng.standard_normal(K * n))
    ds = Dataset(cells, s, y, K)
    return assign_folds(ds, L, rng)


@pytest.fixture
def small_dataset():
    return make_dataset(K=5, n=4, d=2, L=2, seed=1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
