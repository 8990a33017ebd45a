import numpy as np
import pytest


def random_graph(rng: np.random.Generator, n: int, p: float = 0.3, connected: bool = False) -> np.ndarray:
    """Symmetric 0/1 adjacency with zero diagonal; optionally forced connected via a random spanning path."""
    a = (rng.random((n, n)) < p).astype(float)
    a = np.triu(a, 1)
    a = a + a.T
    if connected:
        order = rng.permutation(n)
        for u, v in zip(order[:-1], order[1:]):
            a[u, v] = a[v, u] = 1.0
    return a


def random_factors(rng: np.random.Generator, a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    f = rng.uniform(-1, 1, (n, n))
    f = (f + f.T) / 2 * a
    np.fill_diagonal(f, 1.0)
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
