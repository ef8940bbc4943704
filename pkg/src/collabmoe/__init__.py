"""Collaboration-aware expert-parallel MoE engine on simulated devices."""

from .collab import (
    CollabGraph,
    CommReport,
    NormGraph,
    build_collab_graph,
    collaboration_shares,
    component_growth,
    ct_bounds,
    intra_inter_metrics,
    measure_ct,
    normalize_graph,
)
from .core import (
    Activation,
    CapacityError,
    ConfigError,
    ExpertWeights,
    MoEConfig,
    MoEError,
    PlacementError,
    RoutingError,
    ShapeError,
    StateError,
    Tiles,
    TokenMatrix,
    TokenState,
    tiled_matmul,
)
from .pipeline import backward_vjps, moe_forward_dense, moe_forward_sparse
from .placement import Placement, reschedule_placement, trivial_placement
from .pruning import PruneMode, PruneSpec, SimilarityTable, WeightPolicy, build_similarity_table
from .routing import GateMatrix, RoutingOutcome, gate_scores, topk_route
from .simnet import ClusterSpec, LatencyFit, baseline_replication_ct, fit_latency, run_cluster_forward

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "CapacityError",
    "ClusterSpec",
    "CollabGraph",
    "CommReport",
    "ConfigError",
    "ExpertWeights",
    "GateMatrix",
    "LatencyFit",
    "MoEConfig",
    "MoEError",
    "NormGraph",
    "Placement",
    "PlacementError",
    "PruneMode",
    "PruneSpec",
    "RoutingError",
    "RoutingOutcome",
    "ShapeError",
    "SimilarityTable",
    "StateError",
    "Tiles",
    "TokenMatrix",
    "TokenState",
    "WeightPolicy",
    "backward_vjps",
    "baseline_replication_ct",
    "build_collab_graph",
    "build_similarity_table",
    "collaboration_shares",
    "component_growth",
    "ct_bounds",
    "fit_latency",
    "gate_scores",
    "intra_inter_metrics",
    "measure_ct",
    "moe_forward_dense",
    "moe_forward_sparse",
    "normalize_graph",
    "reschedule_placement",
    "run_cluster_forward",
    "tiled_matmul",
    "topk_route",
    "trivial_placement",
]
