"""Expert placement: contiguous layout and collaboration-aware rescheduling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, PlacementError


@dataclass(frozen=True)
class Placement:
    """``devices[d]`` lists the expert ids hosted on device ``d``."""

    devices: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(tuple(int(e) for e in d) for d in self.devices))

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    @property
    def num_experts(self) -> int:
        return sum(len(d) for d in self.devices)

    def validate(self, num_experts: int | None = None) -> None:
        """Raise unless the lists form an equal-size partition of ``[0, num_experts)``."""
        n = self.num_experts if num_experts is None else num_experts
        flat = [e for d in self.devices for e in d]
        if not self.devices:
            raise PlacementError("placement has no devices")
        if sorted(flat) != list(range(n)):
            raise PlacementError(f"placement is not a partition of [0, {n}): {self.devices}")
        sizes = {len(d) for d in self.devices}
        if len(sizes) != 1:
            raise PlacementError(f"devices hold unequal expert counts: {sorted(sizes)}")

    def device_of(self, num_experts: int | None = None) -> np.ndarray:
        """Expert -> device lookup; ``-1`` for experts not placed."""
        n = num_experts if num_experts is not None else self.num_experts
        out = np.full(n, -1, dtype=np.int64)
        for d, experts in enumerate(self.devices):
            for e in experts:
                if e >= n or e < 0:
                    raise PlacementError(f"expert {e} outside [0, {n})")
                out[e] = d
        return out

    def to_lists(self) -> list[list[int]]:
        return [list(d) for d in self.devices]


def _check_divisible(num_experts: int, num_devices: int) -> int:
    if num_devices < 1 or num_experts < 1:
        raise ConfigError("num_experts and num_devices must be >= 1")
    if num_experts % num_devices:
        raise ConfigError(f"num_experts={num_experts} not divisible by num_devices={num_devices}")
    return num_experts // num_devices


def trivial_placement(num_experts: int, num_devices: int) -> Placement:
    per = _check_divisible(num_experts, num_devices)
    return Placement(tuple(tuple(range(d * per, (d + 1) * per)) for d in range(num_devices)))


def random_placement(num_experts: int, num_devices: int, rng: np.random.Generator) -> Placement:
    per = _check_divisible(num_experts, num_devices)
    perm = rng.permutation(num_experts)
    return Placement(tuple(tuple(sorted(perm[d * per:(d + 1) * per].tolist())) for d in range(num_devices)))


def _argmax_pair(p: np.ndarray) -> tuple[int, int]:
    # upper triangle, row-major, first maximum wins
    n = p.shape[0]
    best, pair = -np.inf, (0, 1)
    for i in range(n):
        for j in range(i + 1, n):
            if p[i, j] > best:
                best, pair = p[i, j], (i, j)
    return pair


def _pick(candidates: list[int], score: np.ndarray, largest: bool) -> int:
    # candidates ascend, so strict comparison keeps the lowest index on ties
    best = candidates[0]
    for e in candidates[1:]:
        if (score[e] > score[best]) if largest else (score[e] < score[best]):
            best = e
    return best


def reschedule_placement(p: np.ndarray, num_devices: int) -> Placement:
    """Greedy farthest-seed clustering of the normalized collaboration graph.

    Device 0 starts from the most collaborative expert pair; every later device
    starts from the unused expert least collaborative with all used experts.
    Each device is then filled with the unused expert having the highest mean
    collaboration with the experts already on it.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ConfigError(f"collaboration graph must be square, got {p.shape}")
    n = p.shape[0]
    per = _check_divisible(n, num_devices)
    used: list[int] = []
    in_use = np.zeros(n, dtype=bool)
    devices: list[list[int]] = []

    def push(dev: list[int], e: int) -> None:
        dev.append(e)
        used.append(e)
        in_use[e] = True

    for d in range(num_devices):
        dev: list[int] = []
        if d == 0:
            if n == 1:
                push(dev, 0)
            else:
                i, j = _argmax_pair(p)
                push(dev, i)
                if per >= 2:
                    push(dev, j)
        else:
            unused = [e for e in range(n) if not in_use[e]]
            inter = p[used].mean(axis=0)
            push(dev, _pick(unused, inter, largest=False))
        while len(dev) < per:
            unused = [e for e in range(n) if not in_use[e]]
            intra = p[dev].mean(axis=0)
            push(dev, _pick(unused, intra, largest=True))
        devices.append(dev)
    return Placement(tuple(tuple(d) for d in devices))
