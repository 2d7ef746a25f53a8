"""Run configuration: one JSON file merged over defaults, unknown keys rejected.

Every module's knobs live in a named section; defaults apply only to absent
keys, and the fully resolved mapping is echoed into each run's output
directory as `resolved_config` so a run can be reproduced from its artifacts
alone.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

from .ann_graph import SUPPORTED_METRICS
from .cluster_sim import LatencyModel, SimCosts
from .engine import EngineConfig
from .roofline import StageRooflineParams
from .scheduler import ControlGains, SchedulerConfig
from .workload import LengthDist, WorkloadSpec


class ConfigError(ValueError):
    """Invalid or unknown configuration; `key` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


DEFAULTS: dict = {
    "workload": {
        "n_db": 2000,
        "dim": 16,
        "n_requests": 100,
        "arrival_rate": 500.0,
        "prompt_len_dist": {"kind": "fixed", "value": 256},
        "output_len_dist": {"kind": "fixed", "value": 64},
        "delta": 32,
        "seed": 7,
    },
    "engine": {
        "m": 64,
        "p": 2,
        "entry_count": 8,
        "batch_capacity": 512,
        "stop_streak": 1,
        "max_extends": 256,
    },
    "scheduler": {
        "slots_n": 8,
        "r": 0.25,
        "r_min": 0.05,
        "r_max": 0.75,
        "tau_pre": 5.0e-5,
        "tau_global": 2.0e-4,
        "e0": 12.0,
        "t_ext_ema_gamma": 0.9,
        "control": {
            "interval": 1.0e-3,
            "delta_r": 0.05,
            "beta_tau": 0.8,
            "tau_pre_min": 1.0e-5,
            "u_kv_target": 0.9,
            "u_kv_margin": 0.05,
            "stall_target": 0.2,
        },
    },
    "latency_model": {
        "intra_node_rtt": 2.0e-5,
        "network_rtt": 2.0e-4,
        "intra_node_bw": 6.0e11,
        "network_bw": 1.25e10,
        "tp_collective_per_layer": 1.0e-6,
        "ep_dispatch_local": 2.0e-6,
        "ep_dispatch_remote": 1.5e-5,
        "contention_factor": 1.15,
        "kv_link_capacity": 1.0e10,
        "retrieval_payload": 256.0,
        "query_payload": 128.0,
    },
    "roofline": {
        "prefill": {"ai": 200.0, "mem_bw": 6.0e11, "peak_flops": 1.25e14, "x_sat": 16.0, "alpha": 0.9},
        "decode": {"ai": 1.0, "mem_bw": 6.0e11, "peak_flops": 1.25e14, "x_sat": 256.0, "alpha": 1.0},
        "ann": {"ai": 1.0, "mem_bw": 6.0e11, "peak_flops": 1.25e14, "x_sat": 256.0, "alpha": 1.0},
    },
    "index": {
        "degree": 16,
        "metric": "l2sq",
    },
    "sim": {
        "base_flops_per_token": 2.0e8,
        "decode_bytes_per_token": 3.0e7,
        "kv_bytes_per_token": 2.0e4,
        "layers": 32,
        "l_pre_max": 1.0e-3,
        "extend_task_flops": 1.5e4,
    },
}


def _merge(defaults: dict, user: dict, prefix: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        if isinstance(defaults[key], dict) and not _is_dist_key(path):
            if not isinstance(value, dict):
                raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
            merged[key] = _merge(defaults[key], value, prefix=path + ".")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _is_dist_key(path: str) -> bool:
    # Length distributions are replaced wholesale, not deep-merged, because
    # their fields depend on the chosen kind.
    return path.endswith("prompt_len_dist") or path.endswith("output_len_dist")


def _length_dist(raw: dict, key: str) -> LengthDist:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError(key, "expected a mapping with a 'kind' field")
    kind = raw["kind"]
    allowed = {
        "fixed": {"kind", "value"},
        "uniform": {"kind", "low", "high"},
        "geometric": {"kind", "mean"},
    }
    if kind not in allowed:
        raise ConfigError(f"{key}.kind", f"must be one of {sorted(allowed)}, got {kind!r}")
    extra = set(raw) - allowed[kind]
    if extra:
        raise ConfigError(f"{key}.{sorted(extra)[0]}", "unknown key")
    try:
        if kind == "fixed":
            return LengthDist.fixed(int(raw["value"]))
        if kind == "uniform":
            return LengthDist.uniform(int(raw["low"]), int(raw["high"]))
        return LengthDist.geometric(float(raw["mean"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from exc


@dataclass
class RunConfig:
    """Validated view over every module's configuration."""

    workload: WorkloadSpec
    engine: EngineConfig
    scheduler: SchedulerConfig
    latency_model: LatencyModel
    costs: SimCosts
    index_degree: int
    metric: str
    resolved: dict = field(repr=False, default_factory=dict)


def _build(section: str, factory, kwargs: dict):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


def resolve(user: dict | None = None) -> RunConfig:
    """Merge a user mapping over the defaults and construct the typed configs."""
    resolved = _merge(DEFAULTS, user or {})

    w = dict(resolved["workload"])
    w["prompt_len_dist"] = _length_dist(w["prompt_len_dist"], "workload.prompt_len_dist")
    w["output_len_dist"] = _length_dist(w["output_len_dist"], "workload.output_len_dist")
    workload = _build("workload", WorkloadSpec, w)

    engine = _build("engine", EngineConfig, resolved["engine"])

    s = dict(resolved["scheduler"])
    s["control"] = _build("scheduler.control", ControlGains, s["control"])
    scheduler = _build("scheduler", SchedulerConfig, s)

    latency = _build("latency_model", LatencyModel, resolved["latency_model"])

    rooflines = {
        stage: _build(f"roofline.{stage}", StageRooflineParams, {**resolved["roofline"][stage], "stage": stage})
        for stage in ("prefill", "decode", "ann")
    }
    costs = _build(
        "sim",
        SimCosts,
        {
            "prefill": rooflines["prefill"],
            "decode": rooflines["decode"],
            "ann": rooflines["ann"],
            **resolved["sim"],
        },
    )

    metric = resolved["index"]["metric"]
    if metric not in SUPPORTED_METRICS:
        raise ConfigError("index.metric", f"only {SUPPORTED_METRICS} supported, got {metric!r}")
    degree = resolved["index"]["degree"]
    if not isinstance(degree, int) or degree < 1:
        raise ConfigError("index.degree", f"must be a positive integer, got {degree!r}")

    return RunConfig(
        workload=workload,
        engine=engine,
        scheduler=scheduler,
        latency_model=latency,
        costs=costs,
        index_degree=degree,
        metric=metric,
        resolved=resolved,
    )


def load(path: str) -> RunConfig:
    """Load and resolve a JSON config file."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            user = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(path, f"not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(path, "top level must be a mapping")
    return resolve(user)


def dump_resolved(config: RunConfig, path: str) -> None:
    """Write the resolved mapping; feeding it back reproduces identical runs."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.resolved, f, indent=2, sort_keys=True)
        f.write("\n")
