"""Linear gating, softmax and top-k expert selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RoutingError, ShapeError


@dataclass
class RoutingOutcome:
    """Per-token selected experts and their routing weights.

    ``ids[t]`` lists the ``k`` experts of token ``t`` in routing order (score
    descending for plain top-k); ``weights[t]`` is aligned with ``ids[t]``.
    """

    ids: np.ndarray  # (num_tokens, k) int64
    weights: np.ndarray  # (num_tokens, k) float64

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != self.ids.shape or self.ids.ndim != 2:
            raise ShapeError(f"ids {self.ids.shape} and weights {self.weights.shape} must match (2-D)")

    @property
    def num_tokens(self) -> int:
        return self.ids.shape[0]

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def validate(self, num_experts: int) -> None:
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= num_experts):
            raise RoutingError(f"expert id outside [0, {num_experts})")
        for t, row in enumerate(self.ids):
            if len(set(row.tolist())) != len(row):
                raise RoutingError(f"token {t} selects duplicate experts: {row.tolist()}")

    def slice(self, rows) -> "RoutingOutcome":
        return RoutingOutcome(self.ids[rows], self.weights[rows])

    @classmethod
    def empty(cls, k: int) -> "RoutingOutcome":
        return cls(np.zeros((0, k), dtype=np.int64), np.zeros((0, k)))

    @classmethod
    def concat(cls, parts: list["RoutingOutcome"]) -> "RoutingOutcome":
        return cls(np.concatenate([p.ids for p in parts]), np.concatenate([p.weights for p in parts]))


@dataclass
class GateMatrix:
    weights: np.ndarray  # (num_experts, embed_dim)

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 2:
            raise ShapeError("gate matrix must be 2-D (num_experts, embed_dim)")

    @property
    def num_experts(self) -> int:
        return self.weights.shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def router_logits(x: np.ndarray, gate: GateMatrix) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != gate.weights.shape[1]:
        raise ShapeError(f"tokens {x.shape} incompatible with gate {gate.weights.shape}")
    return x.astype(np.float64) @ gate.weights.astype(np.float64).T


def gate_scores(x: np.ndarray, gate: GateMatrix) -> np.ndarray:
    """Softmax routing distribution, one row per token."""
    return softmax(router_logits(x, gate))


def rank_experts(scores_row: np.ndarray) -> np.ndarray:
    """Expert indices by descending score; equal scores keep ascending index."""
    return np.argsort(-np.asarray(scores_row, dtype=np.float64), kind="stable")


def normalize_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    s = w.sum(axis=-1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


def topk_route(scores: np.ndarray, k: int, renormalize: bool = True) -> RoutingOutcome:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ShapeError("scores must be 2-D (num_tokens, num_experts)")
    if not 1 <= k <= scores.shape[1]:
        raise RoutingError(f"k={k} outside [1, {scores.shape[1]}]")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    w = np.take_along_axis(scores, order, axis=1)
    if renormalize:
        w = normalize_weights(w)
    return RoutingOutcome(order, w)
