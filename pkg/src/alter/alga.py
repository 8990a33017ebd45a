"""Adaptive long-range encoding: adaptive factors, the biased random-walk
kernel and K-step return-probability embeddings.

``transition_matrix``, ``state_evolution`` and ``mc_return_estimate`` are
plain Markov-chain references used to check the kernel path.

Matrices follow the column convention: entry (i, j) is the weight of a step
from node j to node i, so an unbiased walk matrix is column-stochastic and
a state vector evolves as ``t <- P @ t``.
"""

from __future__ import annotations

import numpy as np

from .graph import BrainGraph, TimeSeriesTable, pearson_matrix


def _square(m: np.ndarray, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{what} must be square, got {m.shape}")
    return m


def degrees(a: np.ndarray) -> np.ndarray:
    return _square(a, "adjacency").sum(axis=0)


def adaptive_factors(ts: TimeSeriesTable | np.ndarray, a: np.ndarray) -> np.ndarray:
    """Pearson correlation on edges of ``a``, 1 on the diagonal, 0 elsewhere."""
    corr = pearson_matrix(ts)
    return factors_from_correlation(corr, a)


def factors_from_correlation(corr: np.ndarray, a: np.ndarray) -> np.ndarray:
    a = _square(a, "adjacency")
    corr = _square(corr, "correlation")
    if corr.shape != a.shape:
        raise ValueError(f"dimension mismatch: correlation {corr.shape} vs adjacency {a.shape}")
    f = np.where(a != 0, corr, 0.0)
    np.fill_diagonal(f, 1.0)
    return f


def graph_factors(g: BrainGraph) -> np.ndarray:
    """Adaptive factors of a graph whose node features are its correlation matrix."""
    return factors_from_correlation(g.x, g.a)


def rw_kernel(f: np.ndarray, a: np.ndarray, renormalize: bool = False) -> np.ndarray:
    """R = (F * A) D^-1 with D the degree matrix of A.

    Isolated nodes keep an all-zero column. With ``renormalize`` each column
    is divided by the sum of its absolute weights instead of the degree.
    """
    f = _square(f, "adaptive factors")
    a = _square(a, "adjacency")
    if f.shape != a.shape:
        raise ValueError(f"dimension mismatch: factors {f.shape} vs adjacency {a.shape}")
    weighted = f * a
    denom = np.abs(weighted).sum(axis=0) if renormalize else a.sum(axis=0)
    denom = np.where(denom == 0, 1.0, denom)
    return weighted / denom[None, :]


def long_range_embedding(r: np.ndarray, k: int) -> np.ndarray:
    """Row i is ``[I, R, R^2, ..., R^(k-1)]_ii``; shape (N, k)."""
    r = _square(r, "kernel")
    if k < 1:
        raise ValueError(f"hop count must be >= 1, got {k}")
    n = r.shape[0]
    e = np.empty((n, k))
    e[:, 0] = 1.0
    power = np.eye(n)
    for s in range(1, k):
        power = power @ r
        e[:, s] = np.diag(power)
    return e


def encode_graph(g: BrainGraph, k: int, renormalize: bool = False) -> np.ndarray:
    """Convenience: factors, kernel and embedding for one graph."""
    return long_range_embedding(rw_kernel(graph_factors(g), g.a, renormalize), k)


# ---------------------------------------------------------------------------
# Markov-chain references
# ---------------------------------------------------------------------------


def transition_matrix(a: np.ndarray) -> np.ndarray:
    """Uniform-neighbour walk, p(i, j) = a(i, j) / deg(j)."""
    a = _square(a, "adjacency")
    deg = a.sum(axis=0)
    return a / np.where(deg == 0, 1.0, deg)[None, :]


def state_evolution(t0: np.ndarray, p: np.ndarray, k: int) -> np.ndarray:
    """Distribution over nodes after ``k`` steps from ``t0``."""
    t = np.asarray(t0, dtype=np.float64)
    if abs(t.sum() - 1.0) > 1e-12 or np.any(t < 0):
        raise ValueError("initial state must be a probability vector")
    if k < 0:
        raise ValueError("hop count must be non-negative")
    p = _square(p, "transition matrix")
    for _ in range(k):
        t = p @ t
    return t


def mc_return_estimate(a: np.ndarray, k: int, n_walks: int, seed: int = 0) -> np.ndarray:
    """Fraction of ``n_walks`` uniform random walks per node that sit at
    their start after ``k`` steps."""
    a = _square(a, "adjacency")
    if n_walks < 1:
        raise ValueError("n_walks must be >= 1")
    n = a.shape[0]
    deg = (a != 0).sum(axis=0)
    if np.any(deg == 0):
        raise ValueError(f"isolated node(s) present: {np.flatnonzero(deg == 0).tolist()}")
    # neighbours of j listed contiguously: nbrs[offsets[j]:offsets[j]+deg[j]]
    nbrs = np.concatenate([np.flatnonzero(a[:, j]) for j in range(n)])
    offsets = np.concatenate([[0], np.cumsum(deg)[:-1]])

    rng = np.random.default_rng(seed)
    start = np.repeat(np.arange(n), n_walks)
    pos = start.copy()
    for _ in range(k):
        pick = (rng.random(pos.size) * deg[pos]).astype(np.int64)
        pos = nbrs[offsets[pos] + pick]
    home = (pos == start).reshape(n, n_walks)
    return home.mean(axis=1)
