"""Latency-aware two-queue scheduling for the shared vector-search pool.

Prefill retrievals carry deadlines and are ranked by slack (earliest deadline
first, discounted by estimated remaining extends); decode probes are FIFO
absorbers.  Each launch reserves a fraction r of the batch buffer for
prefill, gives unused share to the other queue in both directions, and pads
any leftover slots with masked dummies.  A control loop nudges r and the
prefill flush timeout from KV-link utilization and decode-stall feedback.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any

PREFILL = "prefill"
DECODE = "decode"


@dataclass
class QueueEntry:
    """One queued retrieval: deadline-carrying for prefill, deadline-free for decode."""

    request_id: int
    stage: str
    t_arrival: float
    deadline: float | None = None
    est_remaining_extends: float = 0.0
    payload: Any = None

    def __post_init__(self) -> None:
        if self.stage not in (PREFILL, DECODE):
            raise ValueError(f"stage must be prefill or decode, got {self.stage!r}")
        if self.stage == PREFILL:
            if self.deadline is None:
                raise ValueError("prefill entries must carry a deadline")
            if self.deadline < self.t_arrival:
                raise ValueError("deadline must be >= t_arrival")
        if self.est_remaining_extends < 0:
            raise ValueError("est_remaining_extends must be nonnegative")


@dataclass(frozen=True)
class ControlGains:
    """Control-loop knobs: period, step sizes, targets."""

    interval: float = 1.0
    delta_r: float = 0.05
    beta_tau: float = 0.8
    tau_pre_min: float = 0.5
    u_kv_target: float = 0.9
    u_kv_margin: float = 0.05
    stall_target: float = 0.2

    def __post_init__(self) -> None:
        for name in ("interval", "delta_r", "beta_tau", "tau_pre_min", "u_kv_target", "u_kv_margin", "stall_target"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.beta_tau < 1:
            raise ValueError(f"beta_tau must be < 1, got {self.beta_tau}")


@dataclass(frozen=True)
class SchedulerConfig:
    """Batch-buffer length, prefill reservation bounds, flush timeouts, EMA gain."""

    slots_n: int = 8
    r: float = 0.25
    r_min: float = 0.05
    r_max: float = 0.75
    tau_pre: float = 2.0
    tau_global: float = 10.0
    e0: float = 12.0
    t_ext_ema_gamma: float = 0.9
    control: ControlGains = field(default_factory=ControlGains)

    def __post_init__(self) -> None:
        if self.slots_n < 1:
            raise ValueError(f"slots_n must be >= 1, got {self.slots_n}")
        if not 0 <= self.r_min <= self.r <= self.r_max <= 1:
            raise ValueError(f"need 0 <= r_min <= r <= r_max <= 1, got ({self.r_min}, {self.r}, {self.r_max})")
        if not self.tau_pre > 0 or not self.tau_global > 0:
            raise ValueError("flush timeouts must be positive")
        if self.tau_pre > self.tau_global:
            raise ValueError(f"tau_pre ({self.tau_pre}) must not exceed tau_global ({self.tau_global})")
        if not 0 < self.t_ext_ema_gamma < 1:
            raise ValueError(f"t_ext_ema_gamma must lie in (0, 1), got {self.t_ext_ema_gamma}")
        if self.e0 < 0:
            raise ValueError("e0 must be nonnegative")


@dataclass(frozen=True)
class BatchPlan:
    """One launch: picked entries per queue plus masked padding, summing to N."""

    picked_prefill: list[QueueEntry]
    picked_decode: list[QueueEntry]
    pad_count: int

    @property
    def n_pre(self) -> int:
        return len(self.picked_prefill)

    @property
    def n_dec(self) -> int:
        return len(self.picked_decode)


@dataclass(frozen=True)
class FeedbackSample:
    """One control window's measurements."""

    window_end: float
    u_kv: float
    prefill_wait_p95: float
    decode_stall_fraction: float

    def __post_init__(self) -> None:
        if not 0 <= self.u_kv <= 1:
            raise ValueError(f"u_kv must lie in [0, 1], got {self.u_kv}")
        if not 0 <= self.decode_stall_fraction <= 1:
            raise ValueError(f"decode_stall_fraction must lie in [0, 1], got {self.decode_stall_fraction}")
        if self.prefill_wait_p95 < 0:
            raise ValueError("prefill_wait_p95 must be nonnegative")


def slack(entry: QueueEntry, t_now: float, t_ext: float) -> float:
    """deadline - (t_now + est_remaining_extends * t_ext); negative means late."""
    if entry.stage != PREFILL:
        raise ValueError("slack is defined for prefill entries only")
    return entry.deadline - (t_now + entry.est_remaining_extends * t_ext)


def estimate_remaining_extends(e0: float, extends_done: int | None = None) -> float:
    """Constant prior for queued requests; prior minus progress, floored at 0, in flight."""
    if extends_done is None:
        return e0
    return max(0.0, e0 - extends_done)


class TwoQueueScheduler:
    """Owner of the prefill (EDF-by-slack) and decode (FIFO) queues.

    Enqueue may be called by concurrent producers (appends are atomic);
    build_batch / should_launch / control_update belong to a single owner.
    """

    def __init__(self, config: SchedulerConfig):
        self.config = config
        self.r = config.r
        self.tau_pre = config.tau_pre
        self.t_ext: float | None = None
        self.q_pre: list[QueueEntry] = []
        self.q_dec: deque[QueueEntry] = deque()
        self.decisions: list[dict] = []

    # -- queues --------------------------------------------------------------

    def enqueue(self, entry: QueueEntry) -> None:
        if entry.stage == PREFILL:
            self.q_pre.append(entry)
        else:
            self.q_dec.append(entry)

    def backlog(self) -> int:
        return len(self.q_pre) + len(self.q_dec)

    def effective_t_ext(self) -> float:
        return self.t_ext if self.t_ext is not None else 0.0

    def pop_prefill(self, count: int, t_now: float) -> list[QueueEntry]:
        """Remove up to `count` entries in ascending slack, ties by (t_arrival, id)."""
        if count <= 0:
            return []
        t_ext = self.effective_t_ext()
        ranked = sorted(
            self.q_pre, key=lambda e: (slack(e, t_now, t_ext), e.t_arrival, e.request_id)
        )
        picked = ranked[:count]
        picked_ids = {id(e) for e in picked}
        self.q_pre = [e for e in self.q_pre if id(e) not in picked_ids]
        return picked

    def pop_decode(self, count: int) -> list[QueueEntry]:
        """Remove up to `count` entries in arrival order."""
        picked = []
        while count > 0 and self.q_dec:
            picked.append(self.q_dec.popleft())
            count -= 1
        return picked

    # -- launches --------------------------------------------------------------

    def reservation(self) -> int:
        """ceil(r * N): any positive r guarantees at least one prefill slot."""
        return math.ceil(self.r * self.config.slots_n)

    def build_batch(self, t_now: float) -> BatchPlan:
        """Fill N slots: prefill's reserved share first, decode FIFO after,
        give-back in both directions, masked dummies as a last resort."""
        n = self.config.slots_n
        n_pre = min(len(self.q_pre), self.reservation())
        n_dec = min(len(self.q_dec), n - n_pre)
        n_pre += min(n - n_pre - n_dec, len(self.q_pre) - n_pre)
        picked_prefill = self.pop_prefill(n_pre, t_now)
        picked_decode = self.pop_decode(n_dec)
        plan = BatchPlan(
            picked_prefill=picked_prefill,
            picked_decode=picked_decode,
            pad_count=n - n_pre - n_dec,
        )
        self.decisions.append(
            {
                "t": t_now,
                "n_pre": plan.n_pre,
                "n_dec": plan.n_dec,
                "pad": plan.pad_count,
                "r": self.r,
                "tau_pre": self.tau_pre,
            }
        )
        return plan

    def should_launch(self, t_now: float) -> bool:
        """Launch on a full buffer, an aged prefill entry, or the global timeout."""
        if self.backlog() >= self.config.slots_n:
            return True
        if self.q_pre and t_now - min(e.t_arrival for e in self.q_pre) >= self.tau_pre:
            return True
        oldest = [e.t_arrival for e in self.q_pre] + [e.t_arrival for e in self.q_dec]
        if oldest and t_now - min(oldest) >= self.config.tau_global:
            return True
        return False

    # -- feedback --------------------------------------------------------------

    def record_extend_latency(self, observed: float) -> float:
        """Exponential moving average of per-extend latency (first sample initializes)."""
        if not observed > 0:
            raise ValueError(f"observed extend latency must be positive, got {observed}")
        gamma = self.config.t_ext_ema_gamma
        if self.t_ext is None:
            self.t_ext = observed
        else:
            self.t_ext = gamma * self.t_ext + (1.0 - gamma) * observed
        return self.t_ext

    def control_update(self, sample: FeedbackSample) -> tuple[float, float]:
        """Adjust (r, tau_pre) from one window's feedback; exactly one branch fires.

        An under-filled KV link means prefill is starving downstream decode
        capacity, so that branch has priority; otherwise rising decode stalls
        hand slots back to the decode queue.
        """
        gains = self.config.control
        if sample.u_kv < gains.u_kv_target - gains.u_kv_margin:
            self.r = min(self.config.r_max, self.r + gains.delta_r)
            self.tau_pre = max(gains.tau_pre_min, gains.beta_tau * self.tau_pre)
        elif sample.decode_stall_fraction > gains.stall_target:
            self.r = max(self.config.r_min, self.r - gains.delta_r)
        return self.r, self.tau_pre
