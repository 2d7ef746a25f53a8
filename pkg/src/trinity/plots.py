"""Figure rendering for run reports; PNGs land next to the delimited outputs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .cluster_sim import SimMetrics
from .roofline import UtilizationCurve


def save_roofline_figure(curve: UtilizationCurve, path: str, stage: str = "") -> None:
    xs = [p[0] for p in curve.points]
    us = [p[1] for p in curve.points]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, us, marker="." if len(xs) <= 64 else None)
    ax.axhline(curve.u_max, linestyle="--", linewidth=0.8, color="gray",
               label=f"u_max = {curve.u_max:.3g}")
    ax.set_xlabel("batch / query count")
    ax.set_ylabel("utilization")
    if stage:
        ax.set_title(f"{stage} utilization")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_sim_figures(metrics: SimMetrics, out_dir: str, prefix: str = "") -> list[str]:
    """TTFT histogram, per-request stall scatter, and control-signal traces."""
    written = []
    tag = f"{prefix}_" if prefix else ""

    ttfts = [r.ttft for r in metrics.requests]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(ttfts, bins=min(30, max(5, len(ttfts) // 10)))
    ax.set_xlabel("TTFT (s)")
    ax.set_ylabel("requests")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{tag}ttft_hist.png")
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.scatter(
        [r.arrival_time for r in metrics.requests],
        [r.stall_time / r.decode_time if r.decode_time > 0 else 0.0 for r in metrics.requests],
        s=6,
    )
    ax.set_xlabel("arrival time (s)")
    ax.set_ylabel("decode stall fraction")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{tag}stall_fraction.png")
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    if metrics.control_samples:
        ts = [s["t"] for s in metrics.control_samples]
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5, 4.2), sharex=True)
        ax1.plot(ts, [s["u_kv"] for s in metrics.control_samples], label="u_kv")
        ax1.plot(ts, [s["decode_stall_fraction"] for s in metrics.control_samples], label="stall")
        ax1.set_ylabel("signal")
        ax1.legend()
        ax2.plot(ts, [s["r"] for s in metrics.control_samples], label="r")
        ax2.set_ylabel("reservation r")
        ax2.set_xlabel("time (s)")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{tag}control.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def save_compare_figure(results: dict[str, SimMetrics], path: str) -> None:
    archs = list(results)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.2))
    ax1.bar(archs, [results[a].ttft_p95 for a in archs])
    ax1.set_ylabel("TTFT p95 (s)")
    ax1.tick_params(axis="x", rotation=20)
    ax2.bar(archs, [results[a].decode_stall_fraction for a in archs])
    ax2.set_ylabel("decode stall fraction")
    ax2.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
