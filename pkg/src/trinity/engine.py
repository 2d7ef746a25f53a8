"""Continuous-batching execution engine for graph vector search.

Many concurrent searches advance one *extend* at a time: select up to p
unexpanded parents from each request's top-M list, read their fixed-degree
neighbors, drop already-visited ids, and push the survivors into one global
task array that is cut into fixed-shape batches of C slots (padded with
masked dummy tasks).  Results scatter back into per-request top-M merges;
converged requests retire immediately and pending admissions join the next
step, so the distance stage never idles on request boundaries.

A request's evolution depends only on its own state, so a batched run returns
exactly the same ids and distances as running each request alone
(`search_sequential`); batching only groups the distance evaluations.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .ann_graph import Neighbor, NeighborGraph, VectorStore, rowwise_sq_dists

DUMMY = -1  # owner marker for masked padding tasks; their candidate id is 0

ACTIVE = "active"
CONVERGED = "converged"
FINISHED = "finished"


@dataclass
class CandidateEntry:
    id: int
    dist: float
    expanded: bool = False


@dataclass(frozen=True)
class EngineConfig:
    """Shape of the engine's fixed operators.

    m: internal candidate-list size; p: max unexpanded parents per extend;
    entry_count: deterministic strided seed points; batch_capacity: fixed
    distance-batch size C; stop_streak: consecutive no-change extends that
    trigger early stop; max_extends: hard cap per request.
    """

    m: int = 64
    p: int = 2
    entry_count: int = 8
    batch_capacity: int = 512
    stop_streak: int = 1
    max_extends: int = 256

    def __post_init__(self) -> None:
        if not 1 <= self.p <= self.m:
            raise ValueError(f"p must be in [1, m={self.m}], got {self.p}")
        if not 1 <= self.entry_count <= self.m:
            raise ValueError(f"entry_count must be in [1, m={self.m}], got {self.entry_count}")
        if self.batch_capacity < 1:
            raise ValueError(f"batch_capacity must be >= 1, got {self.batch_capacity}")
        if self.stop_streak < 1:
            raise ValueError(f"stop_streak must be >= 1, got {self.stop_streak}")
        if self.max_extends < 1:
            raise ValueError(f"max_extends must be >= 1, got {self.max_extends}")


@dataclass
class SearchRequestState:
    """Compact per-request search state: top-M candidates plus the visited set."""

    request_id: int
    query: np.ndarray  # float64, validated at submission
    k: int
    top_m: list[CandidateEntry] = field(default_factory=list)
    visited: set[int] = field(default_factory=set)
    extends_done: int = 0
    status: str = ACTIVE
    stage: str = "prefill"
    t_arrival: float = 0.0
    deadline: float | None = None
    no_change_streak: int = 0


@dataclass(frozen=True)
class DistanceTask:
    owner: int  # request_id, or DUMMY for masked padding
    candidate: int


@dataclass(frozen=True)
class TaskBatch:
    """Exactly `capacity` task slots: real tasks first, then masked dummies."""

    capacity: int
    tasks: tuple[DistanceTask, ...]
    real_count: int

    def __post_init__(self) -> None:
        if len(self.tasks) != self.capacity:
            raise ValueError(f"batch holds {len(self.tasks)} tasks but capacity is {self.capacity}")
        if not 0 <= self.real_count <= self.capacity:
            raise ValueError(f"real_count {self.real_count} out of range for capacity {self.capacity}")


@dataclass
class MergeReport:
    changed: bool
    inserted_count: int


@dataclass(frozen=True)
class StepReport:
    batches_launched: int
    requests_retired: int
    requests_admitted: int


@dataclass
class EngineStats:
    """Run instrumentation: fixed-shape and masking accounting."""

    batches_launched: int = 0
    real_tasks: int = 0
    dummy_tasks: int = 0
    emissions: int = 0  # candidates admitted past the visited filter
    batch_real_counts: list[int] = field(default_factory=list)

    @property
    def dummy_fraction(self) -> float:
        total = self.real_tasks + self.dummy_tasks
        return self.dummy_tasks / total if total else 0.0


def seed_entry_ids(n_db: int, entry_count: int) -> list[int]:
    """Deterministic strided seed points: floor(i * n_db / entry_count), deduplicated."""
    ids: list[int] = []
    for i in range(entry_count):
        v = i * n_db // entry_count
        if v not in ids:
            ids.append(v)
    return ids


def seed_request(
    query: np.ndarray,
    stage: str,
    t_arrival: float,
    deadline: float | None,
    k: int,
    config: EngineConfig,
    store: VectorStore,
    request_id: int = 0,
) -> SearchRequestState:
    """Initialize a search with the strided entry points, true distances computed."""
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != store.dim:
        raise ValueError(f"query dim {q.shape[0]} != store dim {store.dim}")
    if not np.isfinite(q).all():
        raise ValueError("query must be finite")
    if not 1 <= k <= config.m:
        raise ValueError(f"k must be in [1, m={config.m}], got {k}")
    state = SearchRequestState(
        request_id=request_id, query=q, k=k, stage=stage, t_arrival=t_arrival, deadline=deadline
    )
    entry_ids = seed_entry_ids(store.count, config.entry_count)
    dists = rowwise_sq_dists(q, store.data64[entry_ids])
    for vid, dist in zip(entry_ids, dists):
        state.top_m.append(CandidateEntry(id=vid, dist=float(dist)))
        state.visited.add(vid)
    state.top_m.sort(key=lambda e: (e.dist, e.id))
    return state


def select_parents(state: SearchRequestState, p: int) -> list[int]:
    """First <= p unexpanded top-M entries, best-first; does not mutate state."""
    parents: list[int] = []
    for entry in state.top_m:
        if not entry.expanded:
            parents.append(entry.id)
            if len(parents) == p:
                break
    return parents


def expand(state: SearchRequestState, graph: NeighborGraph, parents: list[int]) -> list[int]:
    """Read each parent's neighbors, filter by visited, mark parents expanded.

    Ids enter the visited set at emission time, so a neighbor shared by two
    parents within the same extend is emitted exactly once.
    """
    by_id = {entry.id: entry for entry in state.top_m}
    emitted: list[int] = []
    for pid in parents:
        entry = by_id.get(pid)
        if entry is None or entry.expanded:
            raise RuntimeError(f"parent {pid} is not an unexpanded top-M entry of request {state.request_id}")
        for nid in graph.adjacency[pid]:
            nid = int(nid)
            if nid not in state.visited:
                state.visited.add(nid)
                emitted.append(nid)
        entry.expanded = True
    return emitted


def build_task_array(
    emissions_by_request: dict[int, list[int]], capacity: int
) -> list[TaskBatch]:
    """Concatenate emissions in ascending request id into batches of exactly C.

    The final partial batch is padded with dummies; zero emissions launch zero
    batches (never an all-dummy batch).
    """
    tasks: list[DistanceTask] = []
    for rid in sorted(emissions_by_request):
        for cand in emissions_by_request[rid]:
            tasks.append(DistanceTask(owner=rid, candidate=cand))
    batches: list[TaskBatch] = []
    for start in range(0, len(tasks), capacity):
        chunk = tasks[start : start + capacity]
        real = len(chunk)
        chunk.extend(DistanceTask(owner=DUMMY, candidate=0) for _ in range(capacity - real))
        batches.append(TaskBatch(capacity=capacity, tasks=tuple(chunk), real_count=real))
    return batches


def execute_distance_batch(
    batch: TaskBatch, store: VectorStore, query_of: dict[int, np.ndarray]
) -> list[tuple[int, int, float]]:
    """Evaluate every non-dummy task; dummies are masked out. Result order = task order.

    Tasks sharing an owner are contiguous within a batch, so each owner's run
    is evaluated with one gathered distance call.
    """
    results: list[tuple[int, int, float]] = []
    n = store.count
    real = batch.tasks[: batch.real_count]
    i = 0
    while i < len(real):
        owner = real[i].owner
        if owner == DUMMY:
            raise RuntimeError("dummy task ahead of real tasks in batch")
        j = i
        cands = []
        while j < len(real) and real[j].owner == owner:
            cand = real[j].candidate
            if not 0 <= cand < n:
                raise RuntimeError(f"candidate id {cand} out of range [0, {n})")
            cands.append(cand)
            j += 1
        dists = rowwise_sq_dists(query_of[owner], store.data64[cands])
        results.extend((owner, cand, float(d)) for cand, d in zip(cands, dists))
        i = j
    return results


def scatter_merge(state: SearchRequestState, results: list[tuple[int, float]], m: int) -> MergeReport:
    """Merge (candidate, dist) results into top-M, keeping the best M by (dist, id)."""
    if not results:
        return MergeReport(changed=False, inserted_count=0)
    existing = {entry.id for entry in state.top_m}
    seen: set[int] = set()
    for cand, _ in results:
        if cand in existing or cand in seen:
            raise RuntimeError(f"candidate {cand} merged twice into request {state.request_id}")
        seen.add(cand)
    before = [entry.id for entry in state.top_m]
    merged = state.top_m + [CandidateEntry(id=cand, dist=dist) for cand, dist in results]
    merged.sort(key=lambda e: (e.dist, e.id))
    state.top_m = merged[:m]
    after = [entry.id for entry in state.top_m]
    inserted = len(set(after) - set(before))
    return MergeReport(changed=after != before, inserted_count=inserted)


def check_early_stop(state: SearchRequestState, config: EngineConfig, changed: bool) -> str:
    """Update the no-change streak and decide whether the request converged."""
    if changed:
        state.no_change_streak = 0
    else:
        state.no_change_streak += 1
    if (
        state.no_change_streak >= config.stop_streak
        or all(entry.expanded for entry in state.top_m)
        or state.extends_done >= config.max_extends
    ):
        state.status = CONVERGED
    return state.status


def finalize(state: SearchRequestState, k: int) -> list[Neighbor]:
    """Extract the first k top-M entries and close the request's lifecycle."""
    if state.status == FINISHED:
        raise RuntimeError(f"request {state.request_id} already finalized")
    if state.status != CONVERGED:
        raise RuntimeError(f"request {state.request_id} is still {state.status}")
    if k > len(state.top_m):
        raise ValueError(f"k={k} exceeds top-M length {len(state.top_m)}")
    state.status = FINISHED
    return [Neighbor(id=e.id, dist=e.dist) for e in state.top_m[:k]]


@dataclass(frozen=True)
class SearchResult:
    request_id: int
    neighbors: list[Neighbor]
    extends: int


class ContinuousBatchEngine:
    """Single-owner stepper over many concurrent searches.

    Admissions are queued (linearizable append) and drained atomically at the
    start of each step; one `step()` advances every active request through
    exactly one extend, launching however many fixed-shape batches the global
    task array needs.
    """

    def __init__(self, store: VectorStore, graph: NeighborGraph, config: EngineConfig):
        if graph.count != store.count:
            raise ValueError(f"graph covers {graph.count} vectors but store holds {store.count}")
        self.store = store
        self.graph = graph
        self.config = config
        self.stats = EngineStats()
        self._admissions: deque[SearchRequestState] = deque()
        self._active: dict[int, SearchRequestState] = {}
        self._results: dict[int, SearchResult] = {}
        self._retired_this_step: list[SearchResult] = []
        self._next_id = 0

    # -- admission ---------------------------------------------------------

    def submit(
        self,
        query: np.ndarray,
        k: int,
        stage: str = "prefill",
        t_arrival: float = 0.0,
        deadline: float | None = None,
    ) -> int:
        rid = self._next_id
        self._next_id += 1
        state = seed_request(query, stage, t_arrival, deadline, k, self.config, self.store, request_id=rid)
        self._admissions.append(state)
        return rid

    @property
    def active_count(self) -> int:
        return len(self._active)

    @property
    def pending_admissions(self) -> int:
        return len(self._admissions)

    def result(self, request_id: int) -> SearchResult | None:
        return self._results.get(request_id)

    def drain_retired(self) -> list[SearchResult]:
        """Results of requests retired by the most recent step."""
        retired = self._retired_this_step
        self._retired_this_step = []
        return retired

    # -- stepping ----------------------------------------------------------

    def step(self) -> StepReport:
        """One extend for every active request; admits, executes, merges, retires."""
        admitted = 0
        while self._admissions:
            state = self._admissions.popleft()
            self._active[state.request_id] = state
            admitted += 1

        order = sorted(self._active)
        emissions_by_request: dict[int, list[int]] = {}
        for rid in order:
            state = self._active[rid]
            parents = select_parents(state, self.config.p)
            emitted = expand(state, self.graph, parents) if parents else []
            emissions_by_request[rid] = emitted
            self.stats.emissions += len(emitted)

        batches = build_task_array(emissions_by_request, self.config.batch_capacity)
        query_of = {rid: self._active[rid].query for rid in order}
        results_by_request: dict[int, list[tuple[int, float]]] = {rid: [] for rid in order}
        for batch in batches:
            self.stats.batches_launched += 1
            self.stats.real_tasks += batch.real_count
            self.stats.dummy_tasks += batch.capacity - batch.real_count
            self.stats.batch_real_counts.append(batch.real_count)
            for owner, cand, dist in execute_distance_batch(batch, self.store, query_of):
                results_by_request[owner].append((cand, dist))

        retired = 0
        for rid in order:
            state = self._active[rid]
            report = scatter_merge(state, results_by_request[rid], self.config.m)
            state.extends_done += 1
            if check_early_stop(state, self.config, report.changed) == CONVERGED:
                extends = state.extends_done
                neighbors = finalize(state, state.k)
                result = SearchResult(request_id=rid, neighbors=neighbors, extends=extends)
                self._results[rid] = result
                self._retired_this_step.append(result)
                del self._active[rid]
                retired += 1

        return StepReport(batches_launched=len(batches), requests_retired=retired, requests_admitted=admitted)

    def run_to_completion(self, max_steps: int | None = None) -> int:
        """Step until no active or pending requests remain; returns steps taken."""
        steps = 0
        while self._active or self._admissions:
            self.step()
            self.drain_retired()
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        return steps


def search_sequential(
    query: np.ndarray,
    store: VectorStore,
    graph: NeighborGraph,
    config: EngineConfig,
    k: int,
) -> SearchResult:
    """Single-request reference path: the identical state machine, one request."""
    engine = ContinuousBatchEngine(store, graph, config)
    rid = engine.submit(query, k)
    while engine.result(rid) is None:
        engine.step()
    return engine.result(rid)
