"""Seeded synthetic vectors and request traces.

All randomness comes from Philox (a 64-bit counter-based generator), so a
given seed reproduces the same vectors and trace bit-for-bit on any platform.
Traces are Poisson arrivals with configurable prompt/output length
distributions; every request carries one prefill query vector plus one probe
query per `delta` generated tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ann_graph import VectorStore

GENERATOR_NAME = "philox"  # documented constant: the portable bit generator


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: fixed value, uniform [low, high], or geometric mean."""

    kind: str
    value: int = 0
    low: int = 0
    high: int = 0
    mean: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if self.value < 1:
                raise ValueError("fixed length must be >= 1")
        elif self.kind == "uniform":
            if not 1 <= self.low <= self.high:
                raise ValueError(f"uniform bounds must satisfy 1 <= low <= high, got [{self.low}, {self.high}]")
        elif self.kind == "geometric":
            if not self.mean >= 1:
                raise ValueError("geometric mean must be >= 1")
        else:
            raise ValueError(f"unknown length distribution kind {self.kind!r}")

    @staticmethod
    def fixed(value: int) -> "LengthDist":
        return LengthDist(kind="fixed", value=value)

    @staticmethod
    def uniform(low: int, high: int) -> "LengthDist":
        return LengthDist(kind="uniform", low=low, high=high)

    @staticmethod
    def geometric(mean: float) -> "LengthDist":
        return LengthDist(kind="geometric", mean=mean)

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.low, self.high + 1))
        return int(rng.geometric(1.0 / self.mean))


@dataclass(frozen=True)
class WorkloadSpec:
    """Trace parameters: database size, arrival process, lengths, probe interval."""

    n_db: int = 2000
    dim: int = 16
    n_requests: int = 100
    arrival_rate: float = 500.0
    prompt_len_dist: LengthDist = field(default_factory=lambda: LengthDist.fixed(256))
    output_len_dist: LengthDist = field(default_factory=lambda: LengthDist.fixed(64))
    delta: int = 32
    seed: int = 7

    def __post_init__(self) -> None:
        if self.n_db < 1 or self.dim < 1 or self.n_requests < 1:
            raise ValueError("n_db, dim, and n_requests must be positive")
        if not self.arrival_rate > 0:
            raise ValueError("arrival_rate must be positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")


@dataclass
class SimRequest:
    """One serving request: lengths, probe cadence, and its query vectors.

    queries[0] is the prefill retrieval; queries[1:] are the decode probes
    (one per delta generated tokens, floor(output_len / delta) of them).
    """

    id: int
    arrival_time: float
    prompt_len: int
    output_len: int
    probe_interval: int
    queries: np.ndarray

    @property
    def n_probes(self) -> int:
        return self.output_len // self.probe_interval


def _gaussian(n: int, dim: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed_seq))
    return rng.standard_normal((n, dim), dtype=np.float32)


def gen_vectors(n: int, dim: int, seed: int) -> VectorStore:
    """n x dim i.i.d. standard Gaussian float32 matrix, bit-identical per seed."""
    if n < 1 or dim < 1:
        raise ValueError("n and dim must be positive")
    return VectorStore(data=_gaussian(n, dim, np.random.SeedSequence(seed)))


def gen_trace(spec: WorkloadSpec) -> list[SimRequest]:
    """Poisson-arrival request trace; a pure function of the spec."""
    ss_trace, ss_queries = np.random.SeedSequence(spec.seed).spawn(2)
    rng = np.random.Generator(np.random.Philox(ss_trace))

    inter = rng.exponential(1.0 / spec.arrival_rate, size=spec.n_requests)
    arrivals = np.cumsum(inter)
    # Tie perturbation: keep arrival times strictly increasing even if an
    # inter-arrival sample underflows to zero.
    for i in range(1, len(arrivals)):
        if arrivals[i] <= arrivals[i - 1]:
            arrivals[i] = arrivals[i - 1] + 1e-12 * (i + 1)

    prompt_lens = [spec.prompt_len_dist.sample(rng) for _ in range(spec.n_requests)]
    output_lens = [spec.output_len_dist.sample(rng) for _ in range(spec.n_requests)]
    query_counts = [1 + out // spec.delta for out in output_lens]
    all_queries = _gaussian(sum(query_counts), spec.dim, ss_queries)

    requests: list[SimRequest] = []
    cursor = 0
    for i in range(spec.n_requests):
        n_q = query_counts[i]
        requests.append(
            SimRequest(
                id=i,
                arrival_time=float(arrivals[i]),
                prompt_len=prompt_lens[i],
                output_len=output_lens[i],
                probe_interval=spec.delta,
                queries=all_queries[cursor : cursor + n_q].copy(),
            )
        )
        cursor += n_q
    return requests
