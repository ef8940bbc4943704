"""Collaboration pruning: confine each token's experts to a device budget."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import CapacityError, ConfigError, ShapeError
from .placement import Placement
from .routing import RoutingOutcome, normalize_weights, rank_experts


class PruneMode(str, enum.Enum):
    NONE = "none"
    ROUTER = "router"
    SIMILARITY = "similarity"


class WeightPolicy(str, enum.Enum):
    INHERIT = "inherit"  # replacement takes the pruned expert's weight
    OWN = "own"  # replacement takes its own softmax score


@dataclass
class SimilarityTable:
    values: np.ndarray  # (N_e, N_e) squared cosine similarity
    ranking: list[list[int]]  # per expert: usable alternatives, most similar first

    @classmethod
    def from_values(cls, values: np.ndarray) -> "SimilarityTable":
        values = np.asarray(values, dtype=np.float64)
        n = values.shape[0]
        usable = np.diag(values) > 0
        ranking = []
        for i in range(n):
            others = [j for j in range(n) if j != i and usable[j]]
            others.sort(key=lambda j: (-values[i, j], j))
            ranking.append(others)
        return cls(values, ranking)

    @property
    def num_experts(self) -> int:
        return self.values.shape[0]


@dataclass
class PruneSpec:
    mode: PruneMode = PruneMode.NONE
    budget: int = 1
    table: SimilarityTable | None = None
    weight_policy: WeightPolicy = WeightPolicy.INHERIT

    def __post_init__(self):
        self.mode = PruneMode(self.mode)
        self.weight_policy = WeightPolicy(self.weight_policy)

    def validate(self, num_devices: int) -> None:
        if self.mode is PruneMode.NONE:
            return
        if not 1 <= self.budget <= num_devices:
            raise ConfigError(f"device budget {self.budget} outside [1, {num_devices}]")
        if self.mode is PruneMode.SIMILARITY and self.table is None:
            raise ConfigError("similarity pruning needs a similarity table")


def allowed_devices(token_ids, placement: Placement, budget: int) -> list[int]:
    """First ``budget`` distinct devices met walking the experts in routing order."""
    dev = placement.device_of()
    out: list[int] = []
    for e in token_ids:
        d = int(dev[e])
        if d not in out:
            if len(out) == budget:
                break
            out.append(d)
    return out


def pruned_weight_policy(
    ids,
    original_weights,
    replaced: list[int],
    policy: WeightPolicy = WeightPolicy.INHERIT,
    scores_row=None,
    renormalize: bool = True,
) -> np.ndarray:
    """Weights for a pruned slot list.

    ``replaced`` holds the slot positions whose expert was substituted; under
    the OWN policy those slots take ``scores_row[new_id]``.
    """
    w = np.array(original_weights, dtype=np.float64)
    if WeightPolicy(policy) is WeightPolicy.OWN and replaced:
        if scores_row is None:
            raise ConfigError("OWN weight policy needs the token's score row")
        for s in replaced:
            w[s] = scores_row[ids[s]]
    return normalize_weights(w) if renormalize else w


def prune_router_score(scores_row, placement: Placement, budget: int, k: int, renormalize: bool = True):
    """Re-select the top-k experts among those living on the allowed devices.

    Returns ``(ids, weights)`` in descending score order.
    """
    scores_row = np.asarray(scores_row, dtype=np.float64)
    order = rank_experts(scores_row)
    allowed = set(allowed_devices(order[:k], placement, budget))
    dev = placement.device_of(len(scores_row))
    ids = [int(e) for e in order if dev[e] in allowed][:k]
    if len(ids) < k:
        raise CapacityError(f"devices {sorted(allowed)} host {len(ids)} experts, need k={k}")
    w = scores_row[ids]
    return np.array(ids, dtype=np.int64), (normalize_weights(w) if renormalize else w)


def prune_similarity(
    ids,
    weights,
    placement: Placement,
    budget: int,
    table: SimilarityTable,
    *,
    scores_row=None,
    policy: WeightPolicy = WeightPolicy.INHERIT,
    renormalize: bool = True,
):
    """Swap every expert outside the allowed devices for its most similar legal stand-in.

    A stand-in must live on an allowed device and must not already be among
    the token's selected experts (kept ones included).
    """
    ids = [int(e) for e in ids]
    allowed = set(allowed_devices(ids, placement, budget))
    dev = placement.device_of(table.num_experts)
    out = list(ids)
    taken = {e for e in ids if dev[e] in allowed}
    replaced = []
    for slot, e in enumerate(ids):
        if dev[e] in allowed:
            continue
        sub = next((c for c in table.ranking[e] if dev[c] in allowed and c not in taken), None)
        if sub is None:
            raise CapacityError(f"no legal replacement for expert {e} within devices {sorted(allowed)}")
        out[slot] = sub
        taken.add(sub)
        replaced.append(slot)
    w = pruned_weight_policy(out, weights, replaced, policy, scores_row, renormalize)
    return np.array(out, dtype=np.int64), w


def prune_routing(routing: RoutingOutcome, scores: np.ndarray | None, placement: Placement,
                  spec: PruneSpec, renormalize: bool = True) -> RoutingOutcome:
    """Apply ``spec`` token by token; NONE returns ``routing`` unchanged."""
    if spec.mode is PruneMode.NONE:
        return routing
    spec.validate(placement.num_devices)
    k = routing.k
    ids = np.empty_like(routing.ids)
    ws = np.empty_like(routing.weights)
    for t in range(routing.num_tokens):
        if spec.mode is PruneMode.ROUTER:
            if scores is None:
                raise ConfigError("router-score pruning needs the softmax scores")
            ids[t], ws[t] = prune_router_score(scores[t], placement, spec.budget, k, renormalize)
        else:
            ids[t], ws[t] = prune_similarity(
                routing.ids[t], routing.weights[t], placement, spec.budget, spec.table,
                scores_row=None if scores is None else scores[t],
                policy=spec.weight_policy, renormalize=renormalize,
            )
    return RoutingOutcome(ids, ws)


class SimilarityAccumulator:
    """Streams router-logit batches into a squared-cosine similarity table.

    Only the running Gram matrix and token count are kept, never the logits.
    """

    def __init__(self, num_experts: int):
        self.num_experts = num_experts
        self.gram = np.zeros((num_experts, num_experts))
        self.count = 0

    def update(self, logits: np.ndarray) -> None:
        h = np.asarray(logits, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.num_experts:
            raise ShapeError(f"logit batch {h.shape} does not have {self.num_experts} columns")
        self.gram += h.T @ h
        self.count += h.shape[0]

    def table(self) -> SimilarityTable:
        n = self.num_experts
        if self.count == 0:
            return SimilarityTable.from_values(np.zeros((n, n)))
        # averaging keeps squared inner products in range for long profiles
        mean_inner = self.gram / self.count
        sq_norm = np.diag(mean_inner).copy()
        num = mean_inner ** 2
        den = np.outer(sq_norm, sq_norm)
        vals = np.divide(num, den, out=np.zeros((n, n)), where=den > 0)
        return SimilarityTable.from_values(np.clip(vals, 0.0, 1.0))


def build_similarity_table(batches: Iterable[np.ndarray], num_experts: int | None = None) -> SimilarityTable:
    acc = None
    for b in batches:
        b = np.asarray(b)
        if acc is None:
            acc = SimilarityAccumulator(num_experts or b.shape[1])
        acc.update(b)
    if acc is None:
        if num_experts is None:
            raise ConfigError("empty logit stream and no num_experts given")
        acc = SimilarityAccumulator(num_experts)
    return acc.table()
