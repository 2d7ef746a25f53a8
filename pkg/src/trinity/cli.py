"""Command-line entry point.

Subcommands: build-index, search, gen, roofline, sim, compare, bench-engine.
Exit status 0 on success, 2 on config or input errors (the diagnostic names
the offending key), 64 for an unknown subcommand.  Diagnostics go to stderr
(verbosity via TRINITY_LOG={error|warn|info|debug}); result data goes to
files or stdout only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import ann_graph, config as config_mod, report
from .cluster_sim import ARCHITECTURES, compare_architectures, simulate
from .engine import ContinuousBatchEngine, EngineConfig, search_sequential
from .roofline import StageRooflineParams, sample_curve
from .workload import gen_trace, gen_vectors

log = logging.getLogger("trinity")

ARCH_FLAGS = {"coupled": "coupled", "prefill-coloc": "prefill_colocated", "pooled": "pooled"}

USAGE = """usage: trinity <command> [options]

commands:
  build-index   build a fixed-degree exact-kNN graph from a vector file
  search        run graph search over a query file (batch or sequential)
  gen           generate query vectors and a request trace from a workload spec
  roofline      evaluate a stage utilization curve to CSV (and optionally PNG)
  sim           simulate one deployment architecture over a generated trace
  compare       simulate all three architectures over the same trace
  bench-engine  compare continuous batching against per-request execution
"""


def _configure_logging() -> None:
    level = os.environ.get("TRINITY_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(stream=sys.stderr, level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _parse_xs(text: str) -> list[float]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"--xs range must be a:b:step, got {text!r}")
        a, b, step = (float(p) for p in parts)
        if step <= 0:
            raise ValueError("--xs range step must be positive")
        xs = []
        v = a
        while v <= b + 1e-12:
            xs.append(v)
            v += step
        return xs
    return [float(p) for p in text.split(",") if p != ""]


def _engine_config_from_args(args: argparse.Namespace) -> EngineConfig:
    return EngineConfig(
        m=args.m, p=args.p, entry_count=args.entry_count,
        batch_capacity=args.capacity, stop_streak=args.stop_streak, max_extends=args.max_extends,
    )


def _add_engine_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--m", type=int, default=64, help="internal candidate list size")
    parser.add_argument("--p", type=int, default=2, help="max unexpanded parents per extend")
    parser.add_argument("--entry-count", dest="entry_count", type=int, default=8)
    parser.add_argument("--capacity", type=int, default=512, help="fixed distance-batch size")
    parser.add_argument("--stop-streak", dest="stop_streak", type=int, default=1)
    parser.add_argument("--max-extends", dest="max_extends", type=int, default=256)


# -- subcommands --------------------------------------------------------------


def cmd_build_index(args: argparse.Namespace) -> int:
    data = ann_graph.read_vectors(args.vectors)
    store = ann_graph.VectorStore(data=data)
    log.info("building degree-%d graph over %d x %d vectors", args.degree, store.count, store.dim)
    graph = ann_graph.build_knn_graph(store, args.degree)
    tmp = args.out + ".tmp"
    ann_graph.write_graph(tmp, graph)
    os.replace(tmp, args.out)
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    store = ann_graph.VectorStore(data=ann_graph.read_vectors(args.vectors))
    graph = ann_graph.read_graph(args.index)
    queries = ann_graph.read_vectors(args.queries)
    cfg = _engine_config_from_args(args)
    if args.mode == "batch":
        engine = ContinuousBatchEngine(store, graph, cfg)
        rids = [engine.submit(q, k=args.k) for q in queries]
        engine.run_to_completion()
        results = [engine.result(rid) for rid in rids]
    else:
        results = [search_sequential(q, store, graph, cfg, args.k) for q in queries]
    lines = []
    for i, res in enumerate(results):
        record = {
            "query": i,
            "ids": [n.id for n in res.neighbors],
            "dists": [n.dist for n in res.neighbors],
            "extends": res.extends,
        }
        lines.append(json.dumps(record, sort_keys=True))
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        report.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = config_mod.load(args.spec)
    spec = cfg.workload
    requests = gen_trace(spec)
    queries = np.concatenate([r.queries for r in requests], axis=0)
    tmp = args.out_vectors + ".tmp"
    ann_graph.write_vectors(tmp, queries)
    os.replace(tmp, args.out_vectors)

    lines = []
    cursor = 0
    for r in requests:
        n_q = r.queries.shape[0]
        lines.append(json.dumps({
            "id": r.id,
            "t_arrival": r.arrival_time,
            "prompt_len": r.prompt_len,
            "output_len": r.output_len,
            "delta": r.probe_interval,
            "query_ids": list(range(cursor, cursor + n_q)),
        }, sort_keys=True))
        cursor += n_q
    report.atomic_write_text(args.out_trace, "\n".join(lines) + "\n")

    if args.out_db:
        store = gen_vectors(spec.n_db, spec.dim, spec.seed)
        tmp = args.out_db + ".tmp"
        ann_graph.write_vectors(tmp, store.data)
        os.replace(tmp, args.out_db)
    return 0


def cmd_roofline(args: argparse.Namespace) -> int:
    params = StageRooflineParams(
        ai=args.ai, mem_bw=args.mem_bw, peak_flops=args.peak_flops,
        x_sat=args.x_sat, alpha=args.alpha, stage=args.stage,
    )
    xs = _parse_xs(args.xs)
    curve = sample_curve(params, xs)
    lines = [f"# u_max={curve.u_max!r}", "x,u"]
    lines.extend(f"{x!r},{u!r}" for x, u in curve.points)
    text = "\n".join(lines) + "\n"
    if args.out:
        report.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    if args.plot:
        from .plots import save_roofline_figure

        save_roofline_figure(curve, args.plot, stage=args.stage)
    return 0


def _prepare_sim_inputs(args: argparse.Namespace):
    cfg = config_mod.load(args.config)
    workload = cfg.workload
    if args.seed is not None:
        from dataclasses import replace

        workload = replace(workload, seed=args.seed)
        # fold the override into the echoed config so re-running from
        # resolved_config alone reproduces this run
        cfg.resolved["workload"]["seed"] = args.seed
    store = gen_vectors(workload.n_db, workload.dim, workload.seed)
    graph = ann_graph.build_knn_graph(store, cfg.index_degree)
    requests = gen_trace(workload)
    return cfg, workload, store, graph, requests


def _write_run_artifacts(out_dir: str, metrics, arch: str) -> None:
    report.write_metrics_json(os.path.join(out_dir, "metrics.json"), metrics)
    report.write_trace_jsonl(os.path.join(out_dir, "trace.jsonl"), metrics)
    report.write_requests_csv(os.path.join(out_dir, "requests.csv"), metrics)
    report.write_decisions_jsonl(
        os.path.join(out_dir, "scheduler_decisions.jsonl"), metrics.scheduler_decisions
    )
    report.write_summary_csv(
        os.path.join(out_dir, "summary.csv"), [report.summary_row(arch, metrics)]
    )


def cmd_sim(args: argparse.Namespace) -> int:
    cfg, workload, store, graph, requests = _prepare_sim_inputs(args)
    arch = ARCH_FLAGS[args.arch]
    metrics = simulate(
        requests, arch, cfg.latency_model, cfg.scheduler, cfg.engine, store, graph, cfg.costs
    )
    os.makedirs(args.out, exist_ok=True)
    config_mod.dump_resolved(cfg, os.path.join(args.out, "resolved_config"))
    _write_run_artifacts(args.out, metrics, arch)
    from .plots import save_sim_figures

    save_sim_figures(metrics, args.out)
    log.info("sim %s: %d requests, ttft_p95=%.6g stall=%.4f", arch, len(requests),
             metrics.ttft_p95, metrics.decode_stall_fraction)
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg, workload, store, graph, requests = _prepare_sim_inputs(args)
    results = compare_architectures(
        requests, cfg.latency_model, cfg.scheduler, cfg.engine, store, graph, cfg.costs
    )
    os.makedirs(args.out, exist_ok=True)
    config_mod.dump_resolved(cfg, os.path.join(args.out, "resolved_config"))
    rows = []
    for arch in ARCHITECTURES:
        arch_dir = os.path.join(args.out, arch)
        os.makedirs(arch_dir, exist_ok=True)
        _write_run_artifacts(arch_dir, results[arch], arch)
        rows.append(report.summary_row(arch, results[arch]))
    report.write_summary_csv(os.path.join(args.out, "summary.csv"), rows)
    from .plots import save_compare_figure

    save_compare_figure(results, os.path.join(args.out, "comparison.png"))
    return 0


def cmd_bench_engine(args: argparse.Namespace) -> int:
    store = ann_graph.VectorStore(data=ann_graph.read_vectors(args.vectors))
    graph = ann_graph.read_graph(args.index)
    queries = ann_graph.read_vectors(args.queries)
    cfg = _engine_config_from_args(args)
    summary: dict = {"modes": {}, "queries": len(queries), "capacity": cfg.batch_capacity}
    if len(queries) == 0:
        sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
        return 0

    # Per-request execution: one engine run per query.
    t0 = time.perf_counter()
    seq_latencies = []
    seq_evals = 0
    seq_batches = 0
    seq_fill = []
    for q in queries:
        q0 = time.perf_counter()
        engine = ContinuousBatchEngine(store, graph, cfg)
        rid = engine.submit(q, k=args.k)
        while engine.result(rid) is None:
            engine.step()
        seq_latencies.append(time.perf_counter() - q0)
        seq_evals += engine.stats.real_tasks
        seq_batches += engine.stats.batches_launched
        seq_fill.extend(engine.stats.batch_real_counts)
    seq_wall = time.perf_counter() - t0
    summary["modes"]["sequential"] = _bench_mode_summary(
        seq_wall, seq_evals, seq_batches, seq_fill, seq_latencies, cfg.batch_capacity
    )

    # Continuous batching: all queries share the task array.
    t0 = time.perf_counter()
    engine = ContinuousBatchEngine(store, graph, cfg)
    rids = [engine.submit(q, k=args.k) for q in queries]
    admitted_at = time.perf_counter()
    done_at: dict[int, float] = {}
    while engine.active_count or engine.pending_admissions:
        engine.step()
        for result in engine.drain_retired():
            done_at[result.request_id] = time.perf_counter()
    batch_wall = time.perf_counter() - t0
    batch_latencies = [done_at[rid] - admitted_at for rid in rids]
    summary["modes"]["batch"] = _bench_mode_summary(
        batch_wall, engine.stats.real_tasks, engine.stats.batches_launched,
        engine.stats.batch_real_counts, batch_latencies, cfg.batch_capacity,
    )
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.out:
        report.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def _bench_mode_summary(wall, evals, batches, fills, latencies, capacity) -> dict:
    return {
        "wall_s": wall,
        "distance_evals": evals,
        "evals_per_s": evals / wall if wall > 0 else 0.0,
        "batches": batches,
        "mean_fill_fraction": float(np.mean(fills)) / capacity if fills else 0.0,
        "dummy_fraction": 1.0 - (evals / (batches * capacity)) if batches else 0.0,
        "latency_p50_s": float(np.percentile(latencies, 50)),
        "latency_p95_s": float(np.percentile(latencies, 95)),
    }


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trinity", description=USAGE)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index")
    p.add_argument("--vectors", required=True)
    p.add_argument("--degree", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("search")
    p.add_argument("--index", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mode", choices=["batch", "sequential"], default="batch")
    p.add_argument("--seed", type=int, default=0, help="reserved; execution is deterministic")
    p.add_argument("--out", default="")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("gen")
    p.add_argument("--spec", required=True, help="config file; the workload section drives generation")
    p.add_argument("--out-vectors", dest="out_vectors", required=True, help="query vector file the trace indexes")
    p.add_argument("--out-trace", dest="out_trace", required=True)
    p.add_argument("--out-db", dest="out_db", default="", help="optionally dump the database vectors too")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("roofline")
    p.add_argument("--stage", choices=["prefill", "decode", "ann"], required=True)
    p.add_argument("--ai", type=float, required=True)
    p.add_argument("--mem-bw", dest="mem_bw", type=float, required=True)
    p.add_argument("--peak-flops", dest="peak_flops", type=float, required=True)
    p.add_argument("--x-sat", dest="x_sat", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--xs", required=True, help="comma list or range a:b:step")
    p.add_argument("--out", default="")
    p.add_argument("--plot", default="")
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("sim")
    p.add_argument("--config", required=True)
    p.add_argument("--arch", choices=sorted(ARCH_FLAGS), required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("compare")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench-engine")
    p.add_argument("--index", required=True)
    p.add_argument("--vectors", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default="")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_bench_engine)

    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    argv = list(sys.argv[1:] if argv is None else argv)
    known = {"build-index", "search", "gen", "roofline", "sim", "compare", "bench-engine"}
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(USAGE)
        return 0
    if argv[0] not in known:
        sys.stderr.write(f"trinity: unknown subcommand {argv[0]!r}\n{USAGE}")
        return 64
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 2
    try:
        return args.func(args)
    except config_mod.ConfigError as exc:
        sys.stderr.write(f"trinity: {exc}\n")
        return 2
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"trinity: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
