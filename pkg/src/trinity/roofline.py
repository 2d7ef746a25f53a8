"""Analytic GPU-utilization model for the prefill, decode, and graph-search stages.

Utilization follows a bandwidth/compute ceiling ``u_max = min(1, ai * mem_bw /
peak_flops)`` with a pre-plateau rise ``(x / x_sat) ** alpha`` in the batch (or
concurrent-query) count ``x``.  Everything here is a pure function over frozen
parameter records, so the simulator can evaluate it from any call site without
synchronization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

STAGES = ("prefill", "decode", "ann")


@dataclass(frozen=True)
class StageRooflineParams:
    """Per-stage roofline inputs.

    ai: arithmetic intensity, FLOP/byte.
    mem_bw: effective memory bandwidth, bytes/s.
    peak_flops: peak compute, FLOP/s.
    x_sat: saturation scale (batch size or concurrent-query count).
    alpha: sublinearity exponent of the pre-plateau rise, in (0, 1].
    """

    ai: float
    mem_bw: float
    peak_flops: float
    x_sat: float
    alpha: float = 1.0
    stage: str = "ann"

    def __post_init__(self) -> None:
        for name in ("ai", "mem_bw", "peak_flops", "x_sat"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha!r}")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")


@dataclass(frozen=True)
class UtilizationCurve:
    """Sampled utilization curve: (x, u) points plus the plateau value."""

    points: tuple[tuple[float, float], ...]
    u_max: float


def u_max(params: StageRooflineParams) -> float:
    """Plateau utilization: min(1, ai * mem_bw / peak_flops)."""
    return min(1.0, params.ai * params.mem_bw / params.peak_flops)


def utilization(x: float, params: StageRooflineParams) -> float:
    """Utilization at batch/query count x: min(u_max, (x / x_sat) ** alpha).

    x = 0 is defined as utilization 0 (alpha > 0 makes the limit unambiguous).
    x is a real number, not an integer, so callers may query fractional
    effective batch sizes.
    """
    if x < 0:
        raise ValueError(f"x must be nonnegative, got {x!r}")
    if x == 0:
        return 0.0
    return min(u_max(params), (x / params.x_sat) ** params.alpha)


def saturation_point(params: StageRooflineParams) -> float:
    """Smallest x at which utilization(x) reaches the plateau.

    Solves (x / x_sat) ** alpha = u_max for x, i.e. x_sat * u_max ** (1/alpha).
    """
    return params.x_sat * u_max(params) ** (1.0 / params.alpha)


def sample_curve(params: StageRooflineParams, xs: Sequence[float]) -> UtilizationCurve:
    """Evaluate the model at each x in xs (nonempty, strictly increasing, >= 0)."""
    if len(xs) == 0:
        raise ValueError("xs must be nonempty")
    prev = None
    for x in xs:
        if x < 0:
            raise ValueError(f"xs values must be nonnegative, got {x!r}")
        if prev is not None and x <= prev:
            raise ValueError("xs must be strictly increasing")
        prev = x
    points = tuple((float(x), utilization(x, params)) for x in xs)
    return UtilizationCurve(points=points, u_max=u_max(params))


# Illustrative per-stage presets.  No calibrated numbers exist for these
# stages, so the values below are defaults meant to show the qualitative
# regimes: compute-roofed prefill, bandwidth-roofed decode and graph search.
PRESETS: dict[str, StageRooflineParams] = {
    "prefill": StageRooflineParams(
        ai=200.0, mem_bw=6.0e11, peak_flops=1.25e14, x_sat=16.0, alpha=0.9, stage="prefill"
    ),
    "decode": StageRooflineParams(
        ai=1.0, mem_bw=6.0e11, peak_flops=1.25e14, x_sat=256.0, alpha=1.0, stage="decode"
    ),
    "ann": StageRooflineParams(
        ai=1.0, mem_bw=6.0e11, peak_flops=1.25e14, x_sat=256.0, alpha=1.0, stage="ann"
    ),
}
