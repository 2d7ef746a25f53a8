"""Deterministic discrete-event simulation of the three deployment layouts.

A trace of LLM requests flows through prefill, a KV-cache transfer link, and
token-by-token decode, issuing vector retrievals before prefill and every
`delta` generated tokens during decode.  Retrievals are served by a shared
vector pool that runs the real continuous-batching engine behind the
two-queue scheduler; the wall time of one pool step is the fixed-shape batch
time derived from the graph-search roofline plateau.

The three architectures differ only through the latency model: where
retrieval traffic travels (intra-node vs network), how expert-parallel
dispatch is displaced, and whether a co-located search GPU contends with
decode.  Equalizing those parameters collapses all three to identical event
traces, which is the simulator's main self-check.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .ann_graph import NeighborGraph, VectorStore
from .engine import ContinuousBatchEngine, EngineConfig
from .roofline import PRESETS, StageRooflineParams, u_max, utilization
from .scheduler import (
    DECODE,
    PREFILL,
    FeedbackSample,
    QueueEntry,
    SchedulerConfig,
    TwoQueueScheduler,
)
from .workload import SimRequest, WorkloadSpec, gen_trace

COUPLED = "coupled"
PREFILL_COLOCATED = "prefill_colocated"
POOLED = "pooled"
ARCHITECTURES = (COUPLED, PREFILL_COLOCATED, POOLED)


@dataclass(frozen=True)
class LatencyModel:
    """Architecture-distinguishing costs; defaults are illustrative, in seconds.

    contention_factor models co-location bandwidth contention in both
    directions: it multiplies the decode step time while a same-node search
    GPU is actively searching (coupled layout), and the pool's step time
    while co-resident LLM work runs (coupled: either stage;
    prefill-colocated: prefill).  The two EP dispatch constants model expert
    traffic staying in-node versus being displaced inter-node by the
    reserved search GPU.
    """

    intra_node_rtt: float = 2e-05
    network_rtt: float = 2e-04
    intra_node_bw: float = 6.0e11
    network_bw: float = 1.25e10
    tp_collective_per_layer: float = 1e-06
    ep_dispatch_local: float = 2e-06
    ep_dispatch_remote: float = 1.5e-05
    contention_factor: float = 1.15
    kv_link_capacity: float = 1.0e10
    retrieval_payload: float = 256.0
    query_payload: float = 128.0

    def __post_init__(self) -> None:
        for name in (
            "intra_node_rtt", "network_rtt", "intra_node_bw", "network_bw",
            "tp_collective_per_layer", "ep_dispatch_local", "ep_dispatch_remote",
            "kv_link_capacity", "retrieval_payload", "query_payload",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (self.intra_node_bw > 0 and self.network_bw > 0 and self.kv_link_capacity > 0):
            raise ValueError("link bandwidths must be positive")
        if self.contention_factor < 1:
            raise ValueError(f"contention_factor must be >= 1, got {self.contention_factor}")
        if self.intra_node_rtt > self.network_rtt:
            raise ValueError("intra_node_rtt must not exceed network_rtt")


@dataclass(frozen=True)
class SimCosts:
    """Serving cost model: per-stage rooflines plus per-token work, in seconds/bytes/FLOPs."""

    prefill: StageRooflineParams = PRESETS["prefill"]
    decode: StageRooflineParams = PRESETS["decode"]
    ann: StageRooflineParams = PRESETS["ann"]
    base_flops_per_token: float = 2.0e8
    decode_bytes_per_token: float = 3.0e7
    kv_bytes_per_token: float = 2.0e4
    layers: int = 32
    l_pre_max: float = 1.0e-3
    extend_task_flops: float = 1.5e4

    def extend_batch_time(self, batch_capacity: int) -> float:
        """Wall time of one fixed-shape distance batch at the search plateau."""
        return batch_capacity * self.extend_task_flops / (self.ann.peak_flops * u_max(self.ann))


def prefill_duration(
    prompt_len: int,
    batch_occupancy: float,
    params: StageRooflineParams,
    base_flops_per_token: float,
    layers: int = 0,
    tp_collective_per_layer: float = 0.0,
) -> float:
    """Roofline compute term plus the per-layer tensor-parallel collective cost."""
    if prompt_len < 1:
        raise ValueError(f"prompt_len must be >= 1, got {prompt_len}")
    occ = max(1.0, batch_occupancy)
    compute = prompt_len * base_flops_per_token / (params.peak_flops * utilization(occ, params))
    return compute + layers * tp_collective_per_layer


def decode_token_duration(
    batch_occupancy: float,
    params: StageRooflineParams,
    bytes_per_token: float,
    arch: str,
    vector_gpu_active: bool,
    lm: LatencyModel,
) -> float:
    """Bandwidth-limited token step plus EP dispatch; contended when co-located.

    Scaled so plateau occupancy yields exactly bytes_per_token / mem_bw.
    """
    occ = max(1.0, batch_occupancy)
    eff = utilization(occ, params) / u_max(params)
    base = bytes_per_token / (params.mem_bw * eff)
    ep = lm.ep_dispatch_remote if arch == COUPLED else lm.ep_dispatch_local
    duration = base + ep
    if arch == COUPLED and vector_gpu_active:
        duration *= lm.contention_factor
    return duration


def retrieval_path_latency(arch: str, stage: str, lm: LatencyModel) -> tuple[float, float]:
    """(dispatch, return) one-way times for a retrieval, payload serialization included."""
    if arch == COUPLED or (arch == PREFILL_COLOCATED and stage == PREFILL):
        rtt, bw = lm.intra_node_rtt, lm.intra_node_bw
    else:
        rtt, bw = lm.network_rtt, lm.network_bw
    dispatch = rtt / 2.0 + lm.query_payload / bw
    ret = rtt / 2.0 + lm.retrieval_payload / bw
    return dispatch, ret


# ---------------------------------------------------------------------------
# Event machinery.

def _time_at_least(base: float, delay: float) -> float:
    """Earliest representable time w with w - base >= delay.

    Timeout wakeups must land on or after the instant the timeout comparison
    becomes true; naive base + delay can round below it.
    """
    w = base + delay
    while w - base < delay:
        w = float(np.nextafter(w, np.inf))
    return w


# Deterministic tie-break rank for simultaneous events.
_KIND_RANK = {
    "retrieval_complete": 0,
    "stage_completion": 1,
    "kv_transfer_complete": 2,
    "batch_launch": 3,
    "arrival": 4,
    "control_tick": 5,
    "retrieval_dispatch": 6,
}


@dataclass
class _Ticket:
    """One in-flight retrieval between a serving stage and the vector pool."""

    ticket_id: int
    stage: str  # prefill | decode
    rs: "_RequestRun"
    issue_t: float
    query: np.ndarray | None = None
    pool_rid: int | None = None


@dataclass
class _RequestRun:
    """Mutable per-request simulation state."""

    req: SimRequest
    tokens_emitted: int = 0
    probes_issued: int = 0
    decode_start: float | None = None
    first_token_time: float | None = None
    last_token_time: float | None = None
    completion: float | None = None
    ttft: float = 0.0
    stall_blocking: float = 0.0
    stall_overhead: float = 0.0
    stall_start: float | None = None
    pending_token_excess: float = 0.0
    prefill_retrieval_latency: float = 0.0


@dataclass
class RequestMetrics:
    id: int
    arrival_time: float
    ttft: float
    prompt_len: int
    output_len: int
    n_probes: int
    stall_time: float
    stall_blocking: float
    stall_overhead: float
    decode_time: float
    completion: float


@dataclass
class SimMetrics:
    """Per-request records plus run aggregates."""

    requests: list[RequestMetrics]
    ttft_p50: float
    ttft_p95: float
    tpt_mean: float
    decode_stall_fraction: float
    u_kv: float
    retrieval_latency: dict[str, dict[str, float]]
    events: list[dict] = field(default_factory=list)
    scheduler_decisions: list[dict] = field(default_factory=list)
    control_samples: list[dict] = field(default_factory=list)

    def aggregates(self) -> dict:
        return {
            "ttft_p50": self.ttft_p50,
            "ttft_p95": self.ttft_p95,
            "tpt_mean": self.tpt_mean,
            "decode_stall_fraction": self.decode_stall_fraction,
            "u_kv": self.u_kv,
            "retrieval_latency": self.retrieval_latency,
            "n_requests": len(self.requests),
        }


class ClusterSimulation:
    """Single-threaded event loop over one architecture and one request trace."""

    def __init__(
        self,
        requests: list[SimRequest],
        arch: str,
        latency_model: LatencyModel,
        scheduler_config: SchedulerConfig,
        engine_config: EngineConfig,
        store: VectorStore,
        graph: NeighborGraph,
        costs: SimCosts,
    ):
        if arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}, got {arch!r}")
        if not requests:
            raise ValueError("workload must be nonempty")
        self.requests = requests
        self.arch = arch
        self.lm = latency_model
        self.costs = costs
        self.engine = ContinuousBatchEngine(store, graph, engine_config)
        self.scheduler = TwoQueueScheduler(scheduler_config)
        self.k = min(10, engine_config.m)
        self.extend_time = costs.extend_batch_time(engine_config.batch_capacity)

        self._heap: list[tuple[float, int, int, str, tuple]] = []
        self._seq = itertools.count()
        self._now = 0.0
        self._ticket_seq = itertools.count()
        self._tickets_by_rid: dict[int, _Ticket] = {}
        self._pool_busy = False
        self._resident_prefill = 0
        self._decode_residents: dict[int, _RequestRun] = {}
        self._stalled: dict[int, _RequestRun] = {}
        self._completed = 0
        self._kv_free_at = 0.0
        self._kv_intervals: list[tuple[float, float]] = []
        self._kv_cursor = 0
        self._kv_busy_total = 0.0

        self._last_tick = 0.0
        self._win_stall = 0.0
        self._win_overhead = 0.0
        self._win_residency = 0.0
        self._win_prefill_waits: list[float] = []

        self._total_stall_blocking = 0.0
        self._total_overhead = 0.0
        self._total_residency = 0.0
        self._retrieval_lat: dict[str, list[float]] = {PREFILL: [], DECODE: []}
        self._runs = {r.id: _RequestRun(req=r) for r in requests}
        self._events_log: list[dict] = []
        self._control_log: list[dict] = []

    # -- event plumbing ------------------------------------------------------

    def _schedule(self, t: float, kind: str, tag: str, payload: tuple = (), ref: int | None = None) -> None:
        heapq.heappush(self._heap, (t, _KIND_RANK[kind], next(self._seq), tag, payload, ref))

    def run(self) -> SimMetrics:
        for r in self.requests:
            self._schedule(r.arrival_time, "arrival", "arrival", (r.id,), ref=r.id)
        self._schedule(self.scheduler.config.control.interval, "control_tick", "control_tick")

        handlers = {
            "arrival": self._on_arrival,
            "retrieval_dispatch": self._on_retrieval_dispatch,
            "pool_step_done": self._on_pool_step_done,
            "retrieval_complete": self._on_retrieval_complete,
            "prefill_done": self._on_prefill_done,
            "kv_done": self._on_kv_done,
            "token": self._on_token,
            "pool_wakeup": self._on_pool_wakeup,
            "control_tick": self._on_control_tick,
        }
        while self._heap:
            t, _rank, _seq, tag, payload, ref = heapq.heappop(self._heap)
            if t < self._now:
                raise RuntimeError(f"event {tag} scheduled in the past: {t} < {self._now}")
            self._now = t
            self._events_log.append({"t": t, "kind": tag, "ref": ref})
            handlers[tag](t, *payload)
        return self._collect()

    # -- retrieval path ------------------------------------------------------

    def _issue_retrieval(self, rs: _RequestRun, stage: str, t: float, query: np.ndarray) -> None:
        ticket = _Ticket(ticket_id=next(self._ticket_seq), stage=stage, rs=rs, issue_t=t, query=query)
        dispatch, _ = retrieval_path_latency(self.arch, stage, self.lm)
        self._schedule(t + dispatch, "retrieval_dispatch", "retrieval_dispatch", (ticket,), ref=ticket.ticket_id)

    def _on_arrival(self, t: float, req_id: int) -> None:
        rs = self._runs[req_id]
        self._issue_retrieval(rs, PREFILL, t, rs.req.queries[0])

    def _on_retrieval_dispatch(self, t: float, ticket: _Ticket) -> None:
        entry = QueueEntry(
            request_id=ticket.ticket_id,
            stage=ticket.stage,
            t_arrival=t,
            deadline=(t + self.costs.l_pre_max) if ticket.stage == PREFILL else None,
            est_remaining_extends=self.scheduler.config.e0,
            payload=ticket,
        )
        self.scheduler.enqueue(entry)
        if ticket.stage == PREFILL:
            self._schedule(_time_at_least(t, self.scheduler.tau_pre), "batch_launch", "pool_wakeup")
        self._schedule(_time_at_least(t, self.scheduler.config.tau_global), "batch_launch", "pool_wakeup")
        self._try_launch(t)

    def _on_pool_wakeup(self, t: float) -> None:
        self._try_launch(t)

    def _try_launch(self, t: float) -> None:
        while self.scheduler.backlog() > 0 and self.scheduler.should_launch(t):
            plan = self.scheduler.build_batch(t)
            if plan.n_pre + plan.n_dec == 0:
                break
            for entry in plan.picked_prefill + plan.picked_decode:
                ticket: _Ticket = entry.payload
                rid = self.engine.submit(
                    ticket.query,
                    k=self.k,
                    stage=ticket.stage,
                    t_arrival=entry.t_arrival,
                    deadline=entry.deadline,
                )
                ticket.pool_rid = rid
                self._tickets_by_rid[rid] = ticket
        self._ensure_pool(t)

    def _pool_contention(self) -> float:
        """Search-GPU slowdown from co-resident LLM work; contention is mutual.

        Coupled nodes host the search GPU next to both serving stages; the
        prefill-colocated layout shares only prefill nodes; the independent
        pool is never contended.
        """
        if self.arch == COUPLED and (self._resident_prefill > 0 or self._decode_residents):
            return self.lm.contention_factor
        if self.arch == PREFILL_COLOCATED and self._resident_prefill > 0:
            return self.lm.contention_factor
        return 1.0

    def _ensure_pool(self, t: float) -> None:
        if self._pool_busy:
            return
        if self.engine.active_count == 0 and self.engine.pending_admissions == 0:
            return
        report = self.engine.step()
        retired = self.engine.drain_retired()
        duration = report.batches_launched * self.extend_time * self._pool_contention()
        if duration > 0:
            self.scheduler.record_extend_latency(duration)
        self._pool_busy = True
        self._schedule(t + duration, "stage_completion", "pool_step_done", (tuple(retired),), ref=len(retired))

    def _on_pool_step_done(self, t: float, retired: tuple) -> None:
        self._pool_busy = False
        for result in retired:
            ticket = self._tickets_by_rid.pop(result.request_id)
            _, ret = retrieval_path_latency(self.arch, ticket.stage, self.lm)
            self._schedule(t + ret, "retrieval_complete", "retrieval_complete", (ticket,), ref=ticket.ticket_id)
        self._try_launch(t)

    def _on_retrieval_complete(self, t: float, ticket: _Ticket) -> None:
        rs = ticket.rs
        latency = t - ticket.issue_t
        self._retrieval_lat[ticket.stage].append(latency)
        if ticket.stage == PREFILL:
            rs.prefill_retrieval_latency = latency
            self._win_prefill_waits.append(latency)
            self._resident_prefill += 1
            duration = prefill_duration(
                rs.req.prompt_len,
                self._resident_prefill,
                self.costs.prefill,
                self.costs.base_flops_per_token,
                self.costs.layers,
                self.lm.tp_collective_per_layer,
            )
            self._schedule(t + duration, "stage_completion", "prefill_done", (rs.req.id,), ref=rs.req.id)
        else:
            blocked = t - ticket.issue_t
            rs.stall_blocking += blocked
            self._total_stall_blocking += blocked
            self._win_stall += t - max(ticket.issue_t, self._last_tick)
            rs.stall_start = None
            self._stalled.pop(rs.req.id, None)
            if rs.tokens_emitted < rs.req.output_len:
                self._start_token(rs, t)
            else:
                self._complete(rs, t)

    # -- prefill / KV / decode stages -----------------------------------------

    def _on_prefill_done(self, t: float, req_id: int) -> None:
        rs = self._runs[req_id]
        self._resident_prefill -= 1
        bytes_total = rs.req.prompt_len * self.costs.kv_bytes_per_token
        start = max(t, self._kv_free_at)
        end = start + bytes_total / self.lm.kv_link_capacity
        self._kv_free_at = end
        self._kv_intervals.append((start, end))
        self._kv_busy_total += end - start
        self._schedule(end, "kv_transfer_complete", "kv_done", (req_id,), ref=req_id)

    def _on_kv_done(self, t: float, req_id: int) -> None:
        rs = self._runs[req_id]
        rs.decode_start = t
        self._decode_residents[req_id] = rs
        self._start_token(rs, t)

    def _start_token(self, rs: _RequestRun, t: float) -> None:
        occ = len(self._decode_residents)
        duration = decode_token_duration(
            occ, self.costs.decode, self.costs.decode_bytes_per_token,
            self.arch, self._pool_busy, self.lm,
        )
        baseline = decode_token_duration(
            occ, self.costs.decode, self.costs.decode_bytes_per_token,
            POOLED, False, self.lm,
        )
        rs.pending_token_excess = max(0.0, duration - baseline)
        self._schedule(t + duration, "stage_completion", "token", (rs.req.id,), ref=rs.req.id)

    def _on_token(self, t: float, req_id: int) -> None:
        rs = self._runs[req_id]
        rs.tokens_emitted += 1
        if rs.first_token_time is None:
            rs.first_token_time = t
            rs.ttft = t - rs.req.arrival_time
        rs.last_token_time = t
        # Retrieval-attributable slowdown (contention, displaced EP dispatch)
        # counts as decode time stalled on retrieval.
        rs.stall_overhead += rs.pending_token_excess
        self._total_overhead += rs.pending_token_excess
        self._win_overhead += rs.pending_token_excess
        rs.pending_token_excess = 0.0

        probe_due = rs.tokens_emitted % rs.req.probe_interval == 0 and rs.probes_issued < rs.req.n_probes
        if probe_due:
            rs.probes_issued += 1
            rs.stall_start = t
            self._stalled[req_id] = rs
            self._issue_retrieval(rs, DECODE, t, rs.req.queries[rs.probes_issued])
        elif rs.tokens_emitted < rs.req.output_len:
            self._start_token(rs, t)
        else:
            self._complete(rs, t)

    def _complete(self, rs: _RequestRun, t: float) -> None:
        self._decode_residents.pop(rs.req.id)
        self._win_residency += t - max(rs.decode_start, self._last_tick)
        self._total_residency += t - rs.decode_start
        rs.completion = t
        self._completed += 1

    # -- control loop ----------------------------------------------------------

    def _kv_busy_in_window(self, start: float, end: float) -> float:
        busy = 0.0
        i = self._kv_cursor
        while i < len(self._kv_intervals):
            s, e = self._kv_intervals[i]
            if s >= end:
                break
            busy += max(0.0, min(e, end) - max(s, start))
            if e <= end:
                i += 1
            else:
                break
        self._kv_cursor = i
        return busy

    def _on_control_tick(self, t: float) -> None:
        window = t - self._last_tick
        for rs in self._stalled.values():
            self._win_stall += t - max(rs.stall_start, self._last_tick)
        for rs in self._decode_residents.values():
            self._win_residency += t - max(rs.decode_start, self._last_tick)
        u_kv = min(1.0, self._kv_busy_in_window(self._last_tick, t) / window) if window > 0 else 0.0
        if self._win_prefill_waits:
            wait_p95 = float(np.percentile(self._win_prefill_waits, 95))
        else:
            wait_p95 = 0.0
        stall = self._win_stall + self._win_overhead
        if self._win_residency > 0:
            stall_fraction = min(1.0, stall / self._win_residency)
        else:
            stall_fraction = 0.0
        sample = FeedbackSample(
            window_end=t, u_kv=u_kv, prefill_wait_p95=wait_p95, decode_stall_fraction=stall_fraction
        )
        old_tau = self.scheduler.tau_pre
        r, tau_pre = self.scheduler.control_update(sample)
        self._control_log.append(
            {"t": t, "u_kv": u_kv, "prefill_wait_p95": wait_p95,
             "decode_stall_fraction": stall_fraction, "r": r, "tau_pre": tau_pre}
        )
        if tau_pre < old_tau and self.scheduler.q_pre:
            oldest = min(e.t_arrival for e in self.scheduler.q_pre)
            self._schedule(max(t, _time_at_least(oldest, tau_pre)), "batch_launch", "pool_wakeup")
        self._win_stall = 0.0
        self._win_overhead = 0.0
        self._win_residency = 0.0
        self._win_prefill_waits = []
        self._last_tick = t
        if self._completed < len(self.requests):
            self._schedule(t + self.scheduler.config.control.interval, "control_tick", "control_tick")

    # -- metrics ----------------------------------------------------------------

    def _collect(self) -> SimMetrics:
        rows: list[RequestMetrics] = []
        token_time = 0.0
        token_count = 0
        for r in self.requests:
            rs = self._runs[r.id]
            if rs.completion is None:
                raise RuntimeError(f"request {r.id} never completed")
            decode_time = rs.completion - rs.decode_start
            rows.append(
                RequestMetrics(
                    id=r.id,
                    arrival_time=r.arrival_time,
                    ttft=rs.ttft,
                    prompt_len=r.prompt_len,
                    output_len=r.output_len,
                    n_probes=r.n_probes,
                    stall_time=rs.stall_blocking + rs.stall_overhead,
                    stall_blocking=rs.stall_blocking,
                    stall_overhead=rs.stall_overhead,
                    decode_time=decode_time,
                    completion=rs.completion,
                )
            )
            if r.output_len > 1:
                token_time += rs.last_token_time - rs.first_token_time
                token_count += r.output_len - 1
        ttfts = [row.ttft for row in rows]
        elapsed = max(row.completion for row in rows)
        stall_total = self._total_stall_blocking + self._total_overhead
        retrieval = {}
        for stage, values in self._retrieval_lat.items():
            if values:
                retrieval[stage] = {
                    "p50": float(np.percentile(values, 50)),
                    "p95": float(np.percentile(values, 95)),
                }
            else:
                retrieval[stage] = {"p50": 0.0, "p95": 0.0}
        return SimMetrics(
            requests=rows,
            ttft_p50=float(np.percentile(ttfts, 50)),
            ttft_p95=float(np.percentile(ttfts, 95)),
            tpt_mean=token_time / token_count if token_count else 0.0,
            decode_stall_fraction=stall_total / self._total_residency if self._total_residency else 0.0,
            u_kv=min(1.0, self._kv_busy_total / elapsed) if elapsed > 0 else 0.0,
            retrieval_latency=retrieval,
            events=self._events_log,
            scheduler_decisions=self.scheduler.decisions,
            control_samples=self._control_log,
        )


def simulate(
    workload: list[SimRequest] | WorkloadSpec,
    arch: str,
    latency_model: LatencyModel,
    scheduler_config: SchedulerConfig,
    engine_config: EngineConfig,
    store: VectorStore,
    graph: NeighborGraph,
    costs: SimCosts,
    seed: int | None = None,
) -> SimMetrics:
    """Run one architecture over a trace (or a workload spec, optionally reseeded)."""
    if isinstance(workload, WorkloadSpec):
        if seed is not None:
            workload = replace(workload, seed=seed)
        requests = gen_trace(workload)
    else:
        requests = workload
    sim = ClusterSimulation(
        requests, arch, latency_model, scheduler_config, engine_config, store, graph, costs
    )
    return sim.run()


def compare_architectures(
    workload: list[SimRequest] | WorkloadSpec,
    latency_model: LatencyModel,
    scheduler_config: SchedulerConfig,
    engine_config: EngineConfig,
    store: VectorStore,
    graph: NeighborGraph,
    costs: SimCosts,
    seed: int | None = None,
) -> dict[str, SimMetrics]:
    """All three architectures over the same trace; one row of aggregates each."""
    if isinstance(workload, WorkloadSpec):
        if seed is not None:
            workload = replace(workload, seed=seed)
        workload = gen_trace(workload)
    return {
        arch: simulate(workload, arch, latency_model, scheduler_config, engine_config, store, graph, costs)
        for arch in ARCHITECTURES
    }
