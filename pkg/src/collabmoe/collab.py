"""Collaboration graphs and communication metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .core import ConfigError, PlacementError, RoutingError
from .placement import Placement
from .routing import RoutingOutcome


@dataclass
class CollabGraph:
    counts: np.ndarray  # (N_e, N_e) int64, symmetric, zero diagonal

    @property
    def num_experts(self) -> int:
        return self.counts.shape[0]


@dataclass
class NormGraph:
    values: np.ndarray  # (N_e, N_e) float64 in [0, 1]


@dataclass
class CommReport:
    mean_replicas: float
    cap_replicas: float
    intra_share: float
    inter_share: float
    cross_device_bytes: int
    per_device_token_counts: list[int] = field(default_factory=list)
    combine_bytes: int = 0
    num_tokens: int = 0
    num_sfd_tokens: int = 0
    num_epd_tokens: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _activation_matrix(routing: RoutingOutcome, num_experts: int) -> np.ndarray:
    ids = routing.ids
    if ids.size and (ids.min() < 0 or ids.max() >= num_experts):
        raise RoutingError(f"expert id outside [0, {num_experts})")
    a = np.zeros((routing.num_tokens, num_experts), dtype=np.int64)
    rows = np.repeat(np.arange(routing.num_tokens), routing.k)
    a[rows, ids.ravel()] = 1
    return a


def build_collab_graph(routing: RoutingOutcome, num_experts: int) -> CollabGraph:
    """Co-activation counts: ``counts[i, j]`` tokens selecting both ``i`` and ``j``."""
    a = _activation_matrix(routing, num_experts)
    c = a.T @ a
    np.fill_diagonal(c, 0)
    return CollabGraph(c)


def accumulate_graph(graph: CollabGraph, routing: RoutingOutcome) -> CollabGraph:
    return CollabGraph(graph.counts + build_collab_graph(routing, graph.num_experts).counts)


def normalize_graph(g: CollabGraph) -> NormGraph:
    c = np.asarray(g.counts, dtype=np.float64)
    top = c.max() if c.size else 0.0
    if top <= 0:
        return NormGraph(np.zeros_like(c))
    return NormGraph(c / top)


def device_spans(routing: RoutingOutcome, placement: Placement, num_experts: int | None = None) -> np.ndarray:
    """Number of distinct devices each token's experts live on."""
    n = num_experts if num_experts is not None else placement.num_experts
    dev = placement.device_of(n)
    ids = routing.ids
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise PlacementError(f"routed expert outside [0, {n})")
    token_dev = dev[ids] if ids.size else np.zeros_like(ids)
    if (token_dev < 0).any():
        missing = sorted(set(ids[token_dev < 0].tolist()))
        raise PlacementError(f"experts {missing} are not placed on any device")
    hit = np.zeros((routing.num_tokens, placement.num_devices), dtype=bool)
    if ids.size:
        hit[np.arange(routing.num_tokens)[:, None], token_dev] = True
    return hit.sum(axis=1)


def measure_ct(routing: RoutingOutcome, placement: Placement, num_experts: int | None = None) -> float:
    """Mean number of devices a token must be replicated to."""
    spans = device_spans(routing, placement, num_experts)
    return float(spans.mean()) if spans.size else 0.0


def ct_bounds(k: int, num_experts: int, num_devices: int) -> tuple[int, int]:
    if num_devices < 1 or num_experts % num_devices:
        raise ConfigError(f"num_experts={num_experts} not divisible by num_devices={num_devices}")
    if not 1 <= k <= num_experts:
        raise ConfigError(f"k={k} outside [1, {num_experts}]")
    return math.ceil(k * num_devices / num_experts), min(k, num_devices)


def intra_inter_metrics(p: NormGraph | np.ndarray, placement: Placement) -> tuple[list[float], np.ndarray]:
    """Mean collaboration within each device and between each device pair."""
    vals = np.asarray(p.values if isinstance(p, NormGraph) else p, dtype=np.float64)
    placement.validate(vals.shape[0])
    nd = placement.num_devices
    intra = []
    for experts in placement.devices:
        idx = list(experts)
        if len(idx) < 2:
            intra.append(0.0)
            continue
        block = vals[np.ix_(idx, idx)]
        intra.append(float((block.sum() - np.trace(block)) / (len(idx) * (len(idx) - 1))))
    inter = np.zeros((nd, nd))
    for d1 in range(nd):
        for d2 in range(nd):
            if d1 != d2:
                inter[d1, d2] = vals[np.ix_(list(placement.devices[d1]), list(placement.devices[d2]))].mean()
    return intra, inter


def collaboration_shares(routing: RoutingOutcome, placement: Placement) -> tuple[float, float]:
    """Fraction of per-token expert pairs that are co-located vs. split across devices.

    Returns ``(0.0, 0.0)`` when no token has two experts.
    """
    if routing.num_tokens == 0 or routing.k < 2:
        return 0.0, 0.0
    dev = placement.device_of()[routing.ids]
    iu, ju = np.triu_indices(routing.k, 1)
    same = dev[:, iu] == dev[:, ju]
    total = same.size
    intra = float(same.sum()) / total
    return intra, 1.0 - intra


def _max_component(parent: np.ndarray, size: np.ndarray, seen: np.ndarray) -> int:
    if not seen.any():
        return 0
    roots = [e for e in range(len(parent)) if seen[e] and parent[e] == e]
    return int(max(size[r] for r in roots))


def component_growth(stream: Iterable[RoutingOutcome], num_experts: int) -> list[tuple[int, int]]:
    """Largest connected component of the co-activation graph after each batch.

    Nodes are experts activated at least once; an edge joins two experts once
    any token has co-activated them.
    """
    parent = np.arange(num_experts)
    size = np.ones(num_experts, dtype=np.int64)
    seen = np.zeros(num_experts, dtype=bool)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    out = [(0, 0)]
    tokens = 0
    for batch in stream:
        if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= num_experts):
            raise RoutingError(f"expert id outside [0, {num_experts})")
        for row in batch.ids.tolist():
            seen[row] = True
            r0 = find(row[0])
            for e in row[1:]:
                r = find(e)
                if r != r0:
                    if size[r] > size[r0]:
                        r, r0 = r0, r
                    parent[r] = r0
                    size[r0] += size[r]
        tokens += batch.num_tokens
        out.append((tokens, _max_component(parent, size, seen)))
    return out
