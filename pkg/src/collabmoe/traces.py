"""Seeded synthetic routing traces standing in for profiled model traffic."""

from __future__ import annotations

import numpy as np

from .core import ConfigError
from .routing import RoutingOutcome


def _weights(rng: np.random.Generator, k: int) -> np.ndarray:
    w = np.sort(rng.random(k) + 1e-3)[::-1]
    return w / w.sum()


def zipf_trace(num_experts: int, k: int, num_tokens: int, alpha: float, rng: np.random.Generator) -> RoutingOutcome:
    """Experts drawn without replacement with popularity ``1 / (rank + 1) ** alpha``.

    Ranks come from a seeded permutation, so ``alpha = 0`` is uniform routing.
    """
    if not 1 <= k <= num_experts:
        raise ConfigError(f"k={k} outside [1, {num_experts}]")
    if alpha < 0:
        raise ConfigError("zipf alpha must be >= 0")
    rank = rng.permutation(num_experts)
    pop = 1.0 / (rank + 1.0) ** alpha
    pop /= pop.sum()
    ids = np.empty((num_tokens, k), dtype=np.int64)
    ws = np.empty((num_tokens, k))
    for t in range(num_tokens):
        ids[t] = rng.choice(num_experts, size=k, replace=False, p=pop)
        ws[t] = _weights(rng, k)
    return RoutingOutcome(ids, ws)


def uniform_trace(num_experts: int, k: int, num_tokens: int, rng: np.random.Generator) -> RoutingOutcome:
    return zipf_trace(num_experts, k, num_tokens, 0.0, rng)


def planted_blocks(num_experts: int, num_blocks: int, rng: np.random.Generator) -> list[list[int]]:
    """Hidden expert clusters: a seeded permutation cut into equal blocks."""
    if num_blocks < 1 or num_experts % num_blocks:
        raise ConfigError(f"num_experts={num_experts} not divisible into {num_blocks} blocks")
    perm = rng.permutation(num_experts)
    size = num_experts // num_blocks
    return [sorted(perm[b * size:(b + 1) * size].tolist()) for b in range(num_blocks)]


def planted_trace(num_experts: int, k: int, num_tokens: int, num_blocks: int, p_in: float,
                  rng: np.random.Generator) -> tuple[RoutingOutcome, list[list[int]]]:
    """Each token picks a home block; every expert slot stays home with probability ``p_in``."""
    if not 0.0 <= p_in <= 1.0:
        raise ConfigError("p_in must lie in [0, 1]")
    if not 1 <= k <= num_experts:
        raise ConfigError(f"k={k} outside [1, {num_experts}]")
    blocks = planted_blocks(num_experts, num_blocks, rng)
    block_of = np.empty(num_experts, dtype=np.int64)
    for b, members in enumerate(blocks):
        block_of[members] = b
    ids = np.empty((num_tokens, k), dtype=np.int64)
    ws = np.empty((num_tokens, k))
    for t in range(num_tokens):
        home = int(rng.integers(num_blocks))
        free = np.ones(num_experts, dtype=bool)
        for j in range(k):
            inside = free & (block_of == home)
            outside = free & (block_of != home)
            pool = inside if rng.random() < p_in else outside
            if not pool.any():
                pool = inside if inside.any() else outside
            e = int(rng.choice(np.nonzero(pool)[0]))
            ids[t, j] = e
            free[e] = False
        ws[t] = _weights(rng, k)
    return RoutingOutcome(ids, ws), blocks


def generate(kind: str, num_experts: int, k: int, num_tokens: int, seed: int, *, alpha: float = 1.0,
             num_blocks: int = 1, p_in: float = 0.9) -> tuple[RoutingOutcome, dict]:
    """Dispatch on ``kind`` in {uniform, zipf, planted}; returns the trace and its metadata."""
    rng = np.random.default_rng(seed)
    meta: dict = {"kind": kind, "seed": seed}
    if kind == "uniform":
        return uniform_trace(num_experts, k, num_tokens, rng), meta
    if kind == "zipf":
        meta["alpha"] = alpha
        return zipf_trace(num_experts, k, num_tokens, alpha, rng), meta
    if kind == "planted":
        routing, blocks = planted_trace(num_experts, k, num_tokens, num_blocks, p_in, rng)
        meta.update(num_blocks=num_blocks, p_in=p_in, blocks=blocks)
        return routing, meta
    raise ConfigError(f"unknown trace kind {kind!r}")
