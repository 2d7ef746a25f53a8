"""Vector storage, exact kNN, and fixed-degree neighbor-graph construction.

This is the substrate the batched search engine walks: a float32 matrix of
database vectors plus a fixed out-degree adjacency matrix of vector ids.  The
metric is squared Euclidean distance (rank-equivalent to Euclidean); the
``metric`` config key is reserved and only ``l2sq`` is accepted.

Tie-breaking is (dist, id) lexicographic everywhere, which makes brute-force
search, graph construction, and the engine's merges fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SUPPORTED_METRICS = ("l2sq",)


@dataclass(frozen=True)
class VectorStore:
    """N x d matrix of finite float32 vectors, immutable after construction.

    A float64 copy is kept alongside so every distance evaluation shares one
    dtype and accumulation path (desk-scale stores make the 2x memory cheap).
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"vector store must be a nonempty 2-D matrix, got shape {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise ValueError("vector store entries must all be finite")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "data64", arr.astype(np.float64))

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NeighborGraph:
    """Fixed out-degree adjacency: row i holds the neighbor ids of vector i."""

    degree: int
    adjacency: np.ndarray

    def __post_init__(self) -> None:
        adj = np.asarray(self.adjacency)
        if adj.ndim != 2:
            raise ValueError(f"adjacency must be 2-D, got shape {adj.shape}")
        if adj.shape[1] != self.degree:
            raise ValueError(f"adjacency has {adj.shape[1]} columns but degree is {self.degree}")
        if adj.dtype != np.uint32:
            adj = adj.astype(np.uint32)
        object.__setattr__(self, "adjacency", adj)

    @property
    def count(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class Neighbor:
    """One search result: vector id and its (squared Euclidean) distance."""

    id: int
    dist: float


@dataclass
class GraphValidationReport:
    """Invariant violations found in a neighbor graph; all lists empty iff valid."""

    range_violations: list[tuple[int, int]] = field(default_factory=list)  # (row, bad id)
    self_loops: list[int] = field(default_factory=list)
    duplicate_rows: list[int] = field(default_factory=list)
    wrong_row_length: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (
            self.range_violations or self.self_loops or self.duplicate_rows or self.wrong_row_length
        )


def rowwise_sq_dists(query64: np.ndarray, rows64: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from one query to each row, in float64.

    Every distance in the package funnels through this kernel: the per-row
    reduction is independent of how many rows share the call, so a value never
    depends on which batch (or how large a batch) it was evaluated in.
    """
    diff = query64 - rows64
    return np.einsum("ij,ij->i", diff, diff)


def pair_sq_dist(query64: np.ndarray, row64: np.ndarray) -> float:
    """Unchecked single-pair fast path of distance()."""
    return float(rowwise_sq_dists(query64, row64.reshape(1, -1))[0])


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance between two equal-dimension finite vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("vectors must be finite")
    return pair_sq_dist(a, b)


def brute_force_knn(store: VectorStore, query: np.ndarray, k: int) -> list[Neighbor]:
    """Exact k nearest neighbors, sorted ascending by (dist, id).

    This is the recall oracle: a dense scan of every database vector with the
    deterministic (dist, id) tie-break.
    """
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")
    if not 1 <= k <= store.count:
        raise ValueError(f"k must be in [1, {store.count}], got {k}")
    dists = rowwise_sq_dists(q, store.data64)
    order = np.lexsort((np.arange(store.count), dists))[:k]
    return [Neighbor(id=int(i), dist=float(dists[i])) for i in order]


def build_knn_graph(store: VectorStore, degree: int, block: int = 512) -> NeighborGraph:
    """Exact kNN graph: row i holds the `degree` nearest neighbors of vector i.

    O(N^2 d) via blocked Gram-matrix distances; self edges excluded, ties by
    smaller id.  The candidate buffer per row is degree + 64, which resolves
    boundary ties exactly unless more than 64 candidates are equidistant at
    the cut (not reachable with continuous data).
    """
    n = store.count
    if not 1 <= degree < n:
        raise ValueError(f"degree must be in [1, {n - 1}], got {degree}")
    data = store.data64
    sq_norms = np.einsum("ij,ij->i", data, data)
    buf = min(n - 1, degree + 64)
    adjacency = np.empty((n, degree), dtype=np.uint32)
    for start in range(0, n, block):
        rows = data[start : start + block]
        d2 = sq_norms[start : start + rows.shape[0], None] + sq_norms[None, :] - 2.0 * (rows @ data.T)
        np.maximum(d2, 0.0, out=d2)
        for j in range(rows.shape[0]):
            i = start + j
            d2[j, i] = np.inf
            cand = np.argpartition(d2[j], buf - 1)[:buf]
            order = np.lexsort((cand, d2[j, cand]))[:degree]
            adjacency[i] = cand[order]
    return NeighborGraph(degree=degree, adjacency=adjacency)


def validate_graph(graph: NeighborGraph, n_db: int) -> GraphValidationReport:
    """Report out-of-range ids, self loops, duplicates, and wrong row lengths."""
    report = GraphValidationReport()
    adj = graph.adjacency
    if adj.shape[1] != graph.degree:
        report.wrong_row_length = list(range(adj.shape[0]))
    for i in range(adj.shape[0]):
        row = adj[i]
        for v in row:
            if int(v) >= n_db:
                report.range_violations.append((i, int(v)))
        if np.any(row == i):
            report.self_loops.append(i)
        if len(set(int(v) for v in row)) != len(row):
            report.duplicate_rows.append(i)
    return report


# ---------------------------------------------------------------------------
# File formats.
#
# Vector file: sequence of records, each a little-endian uint32 dimension d
# followed by d little-endian float32 values; every record must share d.
# Graph file: 16-byte header of two little-endian uint64 (N_db, D) followed by
# N_db * D little-endian uint32 ids in row-major order.


def write_vectors(path: str, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a nonempty 2-D matrix, got shape {arr.shape}")
    n, d = arr.shape
    records = np.empty((n, d + 1), dtype="<u4")
    records[:, 0] = d
    records[:, 1:] = arr.astype("<f4").view("<u4")
    with open(path, "wb") as f:
        f.write(records.tobytes())


def read_vectors(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0:
        # a zero-record file is a legal (empty) query set
        return np.empty((0, 0), dtype=np.float32)
    if len(raw) < 4:
        raise ValueError(f"{path}: not a vector file (shorter than one header)")
    d = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    if d < 1:
        raise ValueError(f"{path}: record dimension must be >= 1, got {d}")
    record_bytes = 4 * (d + 1)
    if len(raw) % record_bytes != 0:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of the record size {record_bytes}")
    records = np.frombuffer(raw, dtype="<u4").reshape(-1, d + 1)
    if not np.all(records[:, 0] == d):
        raise ValueError(f"{path}: records disagree on dimension")
    return records[:, 1:].copy().view("<f4").astype(np.float32)


def write_graph(path: str, graph: NeighborGraph) -> None:
    header = np.array([graph.adjacency.shape[0], graph.degree], dtype="<u8")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(graph.adjacency.astype("<u4").tobytes())


def read_graph(path: str) -> NeighborGraph:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ValueError(f"{path}: not a graph file (missing 16-byte header)")
    n, d = (int(v) for v in np.frombuffer(raw[:16], dtype="<u8"))
    expected = 16 + 4 * n * d
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for a {n}x{d} graph, got {len(raw)}")
    adjacency = np.frombuffer(raw[16:], dtype="<u4").reshape(n, d).copy()
    return NeighborGraph(degree=d, adjacency=adjacency)
