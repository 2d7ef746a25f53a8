import numpy as np
import pytest

from trinity.ann_graph import VectorStore, build_knn_graph
from trinity.workload import gen_vectors


@pytest.fixture(scope="session")
def small_store():
    """1000 x 8 Gaussian vectors with a degree-8 exact-kNN graph."""
    store = gen_vectors(1000, 8, seed=101)
    graph = build_knn_graph(store, 8)
    return store, graph


@pytest.fixture()
def line_store():
    """Three collinear 1-D points (0), (1), (2)."""
    return VectorStore(data=np.array([[0.0], [1.0], [2.0]], dtype=np.float32))
