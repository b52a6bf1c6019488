from __future__ import annotations

import numpy as np
import pytest

from equigraph.graph import GraphSample


def numeric_gradient(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        plus = f()
        flat[k] = old - h
        minus = f()
        flat[k] = old
        gflat[k] = (plus - minus) / (2 * h)
    return grad


def random_graph(rng: np.random.Generator, n_nodes: int, dim: int = 3, n_v: int = 0,
                 n_e: int = 0, n_u: int = 0, label: int | None = None,
                 extra_edges: int = 2) -> GraphSample:
    """Connected random graph: a random spanning tree plus a few chords, both directions."""
    coords = rng.standard_normal((n_nodes, dim))
    und = {(int(rng.integers(k)), k) for k in range(1, n_nodes)}
    for _ in range(extra_edges):
        a, b = rng.choice(n_nodes, size=2, replace=False) if n_nodes > 1 else (0, 0)
        if a != b:
            und.add((int(min(a, b)), int(max(a, b))))
    und = sorted(und)
    edges = und + [(b, a) for a, b in und]
    return GraphSample(
        coords, np.asarray(edges).reshape(-1, 2),
        node_features=rng.standard_normal((n_nodes, n_v)),
        edge_features=rng.standard_normal((len(edges), n_e)),
        global_features=rng.standard_normal(n_u), label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
