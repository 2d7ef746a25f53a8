"""Continuously batched graph vector search, two-queue scheduling, and a
deterministic cluster simulator for the three retrieval deployment layouts."""

from .ann_graph import (
    Neighbor,
    NeighborGraph,
    VectorStore,
    brute_force_knn,
    build_knn_graph,
    distance,
    validate_graph,
)
from .cluster_sim import (
    ARCHITECTURES,
    LatencyModel,
    SimCosts,
    SimMetrics,
    compare_architectures,
    simulate,
)
from .engine import ContinuousBatchEngine, EngineConfig, search_sequential
from .roofline import StageRooflineParams, sample_curve, saturation_point, u_max, utilization
from .scheduler import FeedbackSample, QueueEntry, SchedulerConfig, TwoQueueScheduler, slack
from .workload import SimRequest, WorkloadSpec, gen_trace, gen_vectors

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "ContinuousBatchEngine",
    "EngineConfig",
    "FeedbackSample",
    "LatencyModel",
    "Neighbor",
    "NeighborGraph",
    "QueueEntry",
    "SchedulerConfig",
    "SimCosts",
    "SimMetrics",
    "SimRequest",
    "StageRooflineParams",
    "TwoQueueScheduler",
    "VectorStore",
    "WorkloadSpec",
    "brute_force_knn",
    "build_knn_graph",
    "compare_architectures",
    "distance",
    "gen_trace",
    "gen_vectors",
    "sample_curve",
    "saturation_point",
    "search_sequential",
    "simulate",
    "slack",
    "u_max",
    "utilization",
    "validate_graph",
]
