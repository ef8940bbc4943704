"""Shared numeric substrate: configuration, token/weight containers, tiled matmul."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class MoEError(Exception):
    """Base class for engine errors."""


class ShapeError(MoEError, ValueError):
    pass


class ConfigError(MoEError, ValueError):
    pass


class PlacementError(MoEError, ValueError):
    pass


class RoutingError(MoEError, ValueError):
    pass


class CapacityError(MoEError, ValueError):
    """Pruning budget leaves too few experts to fill k slots."""


class StateError(MoEError, RuntimeError):
    pass


class TokenState(str, enum.Enum):
    ORI = "ORI"
    SFD = "SFD"
    EPD = "EPD"


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    SILU = "silu"
    RELU = "relu"


def activate(x: np.ndarray, kind: Activation) -> np.ndarray:
    kind = Activation(kind)
    if kind is Activation.IDENTITY:
        return x
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    return x / (1.0 + np.exp(-x))


def activate_grad(x: np.ndarray, kind: Activation) -> np.ndarray:
    """Derivative of the activation evaluated at pre-activation ``x``."""
    kind = Activation(kind)
    if kind is Activation.IDENTITY:
        return np.ones_like(x)
    if kind is Activation.RELU:
        return (x > 0).astype(x.dtype)
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


@dataclass
class TokenMatrix:
    data: np.ndarray
    state: TokenState = TokenState.ORI

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeError(f"token matrix must be 2-D, got shape {self.data.shape}")
        self.state = TokenState(self.state)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass
class ExpertWeights:
    """Per-expert two-layer MLP: ``E_i(x) = act(x @ w1[i]) @ w2[i]``."""

    w1: np.ndarray  # (num_experts, d_in, d_hidden)
    w2: np.ndarray  # (num_experts, d_hidden, d_in)
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        self.w1 = np.asarray(self.w1)
        self.w2 = np.asarray(self.w2)
        self.activation = Activation(self.activation)
        if self.w1.ndim != 3 or self.w2.ndim != 3:
            raise ShapeError("expert weights must be 3-D (num_experts, rows, cols)")
        n, d_in, h = self.w1.shape
        if self.w2.shape != (n, h, d_in):
            raise ShapeError(f"w2 shape {self.w2.shape} does not match w1 shape {self.w1.shape}")

    @property
    def num_experts(self) -> int:
        return self.w1.shape[0]

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[2]

    def expert(self, x: np.ndarray, i: int) -> np.ndarray:
        """Straight dense evaluation of expert ``i`` in float64 (oracle path)."""
        h = np.asarray(x, dtype=np.float64) @ self.w1[i].astype(np.float64)
        return activate(h, self.activation) @ self.w2[i].astype(np.float64)


@dataclass(frozen=True)
class Tiles:
    m: int = 16
    k: int = 16
    n: int = 16

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ConfigError(f"tile sizes must be >= 1, got {(self.m, self.k, self.n)}")


@dataclass
class MoEConfig:
    num_experts: int
    top_k: int
    num_devices: int = 1
    embed_dim: int = 32
    hidden_dim: int = 64
    tiles: Tiles = field(default_factory=Tiles)
    seed: int = 0
    renormalize: bool = True
    activation: Activation = Activation.IDENTITY
    dtype: str = "float32"

    def __post_init__(self):
        self.activation = Activation(self.activation)
        self.validate()

    def validate(self) -> None:
        if self.num_experts < 1 or self.num_devices < 1:
            raise ConfigError("num_experts and num_devices must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k={self.top_k} outside [1, {self.num_experts}]")
        if self.num_experts % self.num_devices:
            raise ConfigError(
                f"num_experts={self.num_experts} not divisible by num_devices={self.num_devices}"
            )
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("embed_dim and hidden_dim must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def experts_per_device(self) -> int:
        return self.num_experts // self.num_devices

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_experts(cfg: MoEConfig, rng: np.random.Generator) -> ExpertWeights:
    d, h = cfg.embed_dim, cfg.hidden_dim
    w1 = rng.standard_normal((cfg.num_experts, d, h)) / np.sqrt(d)
    w2 = rng.standard_normal((cfg.num_experts, h, d)) / np.sqrt(h)
    return ExpertWeights(w1.astype(cfg.np_dtype), w2.astype(cfg.np_dtype), cfg.activation)


def tiled_matmul(a: np.ndarray, b: np.ndarray, tiles: Tiles | tuple = Tiles()) -> np.ndarray:
    """Blocked ``a @ b`` accumulated in float64 with a fixed summation order.

    Every output element is summed over the inner index in ascending order,
    one product at a time, so the result is bit-identical for any tile shape.
    """
    if not isinstance(tiles, Tiles):
        tiles = Tiles(*tiles)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    m, kk = a.shape
    n = b.shape[1]
    a64 = a.astype(np.float64, copy=False)
    b64 = b.astype(np.float64, copy=False)
    out = np.zeros((m, n), dtype=np.float64)
    for i0 in range(0, m, tiles.m):
        i1 = min(i0 + tiles.m, m)
        for j0 in range(0, n, tiles.n):
            j1 = min(j0 + tiles.n, n)
            acc = out[i0:i1, j0:j1]
            for k0 in range(0, kk, tiles.k):
                for p in range(k0, min(k0 + tiles.k, kk)):
                    acc += a64[i0:i1, p, None] * b64[None, p, j0:j1]
    return out
