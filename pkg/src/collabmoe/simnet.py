"""Simulated expert-parallel cluster: orchestration, replica accounting, latency fit."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .collab import CommReport, measure_ct
from .core import ConfigError, ExpertWeights, MoEConfig, MoEError, Tiles
from .pipeline import LayerResult, forward_routed, replica_cap, route, shard_tokens
from .placement import Placement
from .pruning import PruneSpec
from .routing import GateMatrix, RoutingOutcome


class FitError(MoEError, ValueError):
    pass


class ReplicationMode(str, enum.Enum):
    REPLICATE_K = "replicate_k"  # one copy per selected expert
    DEDUP = "dedup"  # one copy per destination device


@dataclass
class ClusterSpec:
    num_devices: int
    bytes_per_scalar: int = 4
    link_seconds_per_byte: float | None = None  # annotation only
    sources: str = "round_robin"
    accounting: ReplicationMode = ReplicationMode.DEDUP

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigError("cluster needs at least one device")
        self.accounting = ReplicationMode(self.accounting)


@dataclass
class Model:
    cfg: MoEConfig
    gate: GateMatrix
    experts: ExpertWeights


@dataclass
class LatencyFit:
    slope: float
    intercept: float
    r_squared: float

    def predict(self, ct: float) -> float:
        return self.slope * ct + self.intercept


def baseline_replication_ct(routing: RoutingOutcome, placement: Placement,
                            mode: ReplicationMode = ReplicationMode.REPLICATE_K) -> float:
    """Mean replicas per token under classic (one per expert) or deduplicated dispatch."""
    mode = ReplicationMode(mode)
    if routing.num_tokens == 0:
        return 0.0
    if mode is ReplicationMode.REPLICATE_K:
        return float(routing.k)
    return measure_ct(routing, placement)


def _replicate_k_bytes(routing: RoutingOutcome, placement: Placement, sources: list[np.ndarray],
                       width: int, bps: int) -> int:
    dev = placement.device_of()
    moved = 0
    for s, tok in enumerate(sources):
        if tok.size:
            moved += int((dev[routing.ids[tok]] != s).sum())
    return moved * width * bps


def simulate_routed(x: np.ndarray, routing: RoutingOutcome, experts: ExpertWeights, placement: Placement,
                    cluster: ClusterSpec, *, tiles: Tiles = Tiles(), cap: float | None = None) -> LayerResult:
    """Run the data path for a fixed routing and apply the cluster's replica accounting."""
    if cluster.num_devices != placement.num_devices:
        raise ConfigError(f"cluster has {cluster.num_devices} devices, placement {placement.num_devices}")
    res = forward_routed(x, routing, experts, placement, tiles=tiles, sources=cluster.sources,
                         bytes_per_scalar=cluster.bytes_per_scalar, cap=cap)
    if cluster.accounting is ReplicationMode.REPLICATE_K:
        report = res.report
        shards = shard_tokens(res.state.num_tokens, placement.num_devices, cluster.sources)
        moved = _replicate_k_bytes(routing, placement, shards, experts.d_in, cluster.bytes_per_scalar)
        report.mean_replicas = baseline_replication_ct(routing, placement, ReplicationMode.REPLICATE_K)
        report.cap_replicas = float(routing.k)
        report.cross_device_bytes = moved
        report.combine_bytes = moved
    return res


def simulate_layer(x: np.ndarray, model: Model, placement: Placement, prune: PruneSpec | None,
                   cluster: ClusterSpec) -> LayerResult:
    """Route, optionally prune, and run one layer across the simulated devices.

    Values never depend on ``cluster``; only the communication report does.
    """
    cfg = model.cfg
    x = np.asarray(x, dtype=cfg.np_dtype)
    routing, scores = route(x, model.gate, cfg, placement, prune)
    res = simulate_routed(x, routing, model.experts, placement, cluster, tiles=cfg.tiles,
                          cap=replica_cap(cfg.top_k, cfg.num_devices, prune))
    res.scores = scores
    return res


def run_cluster_forward(x: np.ndarray, model: Model, placement: Placement, prune: PruneSpec | None,
                        cluster: ClusterSpec) -> tuple[np.ndarray, CommReport]:
    res = simulate_layer(x, model, placement, prune, cluster)
    return res.output, res.report


def link_seconds(report: CommReport, cluster: ClusterSpec) -> float | None:
    if cluster.link_seconds_per_byte is None:
        return None
    return (report.cross_device_bytes + report.combine_bytes) * cluster.link_seconds_per_byte


def fit_latency(points) -> LatencyFit:
    """Ordinary least squares of latency on mean replicas."""
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise FitError("need at least two (ct, seconds) points")
    ct, sec = pts[:, 0], pts[:, 1]
    if np.ptp(ct) == 0:
        raise FitError("all ct values are equal; slope is undefined")
    design = np.column_stack([ct, np.ones_like(ct)])
    (slope, intercept), *_ = np.linalg.lstsq(design, sec, rcond=None)
    resid = sec - (slope * ct + intercept)
    ss_tot = float(((sec - sec.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float((resid ** 2).sum()) / ss_tot
    return LatencyFit(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)))
