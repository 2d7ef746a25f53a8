"""Result-artifact writers: metrics.json, trace.jsonl, requests.csv, summary.csv.

All writers are deterministic (sorted JSON keys, full-precision repr floats)
and atomic: content goes to a temporary sibling file that is renamed into
place, so a declared artifact is never left half-written.
"""

from __future__ import annotations

import csv
import io
import json
import os

from .cluster_sim import SimMetrics

SUMMARY_FIELDS = [
    "arch",
    "n_requests",
    "ttft_p50",
    "ttft_p95",
    "tpt_mean",
    "decode_stall_fraction",
    "u_kv",
    "retrieval_prefill_p50",
    "retrieval_prefill_p95",
    "retrieval_decode_p50",
    "retrieval_decode_p95",
]


def atomic_write_text(path: str, content: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(content)
    os.replace(tmp, path)


def write_metrics_json(path: str, metrics: SimMetrics) -> None:
    atomic_write_text(path, json.dumps(metrics.aggregates(), indent=2, sort_keys=True) + "\n")


def write_trace_jsonl(path: str, metrics: SimMetrics) -> None:
    lines = [json.dumps(event, sort_keys=True) for event in metrics.events]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def write_requests_csv(path: str, metrics: SimMetrics) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        ["id", "arrival_time", "ttft", "prompt_len", "output_len", "n_probes",
         "stall_time", "stall_blocking", "stall_overhead", "decode_time", "completion"]
    )
    for row in metrics.requests:
        writer.writerow(
            [row.id, repr(row.arrival_time), repr(row.ttft), row.prompt_len, row.output_len,
             row.n_probes, repr(row.stall_time), repr(row.stall_blocking),
             repr(row.stall_overhead), repr(row.decode_time), repr(row.completion)]
        )
    atomic_write_text(path, buf.getvalue())


def summary_row(arch: str, metrics: SimMetrics) -> dict:
    return {
        "arch": arch,
        "n_requests": len(metrics.requests),
        "ttft_p50": repr(metrics.ttft_p50),
        "ttft_p95": repr(metrics.ttft_p95),
        "tpt_mean": repr(metrics.tpt_mean),
        "decode_stall_fraction": repr(metrics.decode_stall_fraction),
        "u_kv": repr(metrics.u_kv),
        "retrieval_prefill_p50": repr(metrics.retrieval_latency["prefill"]["p50"]),
        "retrieval_prefill_p95": repr(metrics.retrieval_latency["prefill"]["p95"]),
        "retrieval_decode_p50": repr(metrics.retrieval_latency["decode"]["p50"]),
        "retrieval_decode_p95": repr(metrics.retrieval_latency["decode"]["p95"]),
    }


def write_summary_csv(path: str, rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def write_decisions_jsonl(path: str, decisions: list[dict]) -> None:
    lines = [json.dumps(d, sort_keys=True) for d in decisions]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
