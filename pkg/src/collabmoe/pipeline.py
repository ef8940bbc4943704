"""Index-guided MoE data path: dispatch, sparse expert compute, combine.

Token tensors move through three layouts. ORI holds one row per token, SFD
one row per (token, device) pair and EPD one row per (token, expert) pair.
Two re-index matrices with ``-1`` sentinels drive every transition:

* ``brim0`` (devices x ORI tokens) maps ORI rows to SFD rows on the source;
* ``brim1`` (local experts x SFD tokens) maps SFD rows to EPD rows on the
  destination device.

All sums run in float64 in a fixed order and are cast back to the working
dtype at operation boundaries, so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collab import CommReport, collaboration_shares
from .core import (
    ExpertWeights,
    MoEConfig,
    PlacementError,
    RoutingError,
    ShapeError,
    StateError,
    Tiles,
    activate,
    activate_grad,
    tiled_matmul,
)
from .placement import Placement
from .pruning import PruneMode, PruneSpec, prune_routing
from .routing import GateMatrix, RoutingOutcome, gate_scores, topk_route


# --- index construction -----------------------------------------------------

def _counter_fill(hit: np.ndarray) -> np.ndarray:
    # row-major walk: first axis outer, second inner
    out = np.full(hit.shape, -1, dtype=np.int64)
    flat = out.reshape(-1)
    mask = hit.reshape(-1)
    flat[mask] = np.arange(int(mask.sum()))
    return out


def build_brim0(routing: RoutingOutcome, placement: Placement) -> np.ndarray:
    dev = placement.device_of()
    ids = routing.ids
    if ids.size and (ids.min() < 0 or ids.max() >= len(dev)):
        raise PlacementError(f"routed expert outside [0, {len(dev)})")
    hit = np.zeros((placement.num_devices, routing.num_tokens), dtype=bool)
    if ids.size:
        token_dev = dev[ids]
        if (token_dev < 0).any():
            raise PlacementError("routing selects an expert that no device hosts")
        hit[token_dev, np.arange(routing.num_tokens)[:, None]] = True
    return _counter_fill(hit)


def localize_ids(ids: np.ndarray, local_experts) -> np.ndarray:
    """Mask every id not hosted locally with ``-1``."""
    ids = np.asarray(ids, dtype=np.int64)
    return np.where(np.isin(ids, list(local_experts)), ids, -1)


def build_brim1(local_ids: np.ndarray, local_experts, weights: np.ndarray | None = None):
    """Expert-major index from SFD tokens to EPD rows.

    ``local_ids`` is the SFD routing with non-local slots masked to ``-1``.
    Returns ``brim1`` and, when ``weights`` is given, the aligned weight matrix.
    """
    local_ids = np.asarray(local_ids, dtype=np.int64)
    local_experts = list(local_experts)
    pos = {e: i for i, e in enumerate(local_experts)}
    n_sfd = local_ids.shape[0]
    hit = np.zeros((len(local_experts), n_sfd), dtype=bool)
    brim_w = np.zeros((len(local_experts), n_sfd)) if weights is not None else None
    for t in range(n_sfd):
        row = local_ids[t]
        if not (row >= 0).any():
            raise RoutingError(f"SFD token {t} activates no local expert")
        for j, e in enumerate(row.tolist()):
            if e < 0:
                continue
            if e not in pos:
                raise RoutingError(f"SFD token {t} routed to foreign expert {e}")
            hit[pos[e], t] = True
            if brim_w is not None:
                brim_w[pos[e], t] = weights[t, j]
    brim1 = _counter_fill(hit)
    return (brim1, brim_w) if weights is not None else brim1


def check_brim(brim: np.ndarray) -> None:
    """Raise unless the non-negative entries enumerate ``0..n-1`` in row-major order."""
    vals = brim[brim >= 0]
    if not np.array_equal(vals, np.arange(vals.size)):
        raise StateError("re-index matrix entries are not a row-major enumeration")
    if ((brim < -1)).any():
        raise StateError("re-index matrix holds values below the -1 sentinel")


# --- data movement -----------------------------------------------------------

def dispatch(x: np.ndarray, routing: RoutingOutcome, brim0: np.ndarray):
    """Copy each ORI row once per destination device it needs.

    Returns ``(x_sfd, ids_sfd, w_sfd)``; routing rows travel with their token.
    """
    x = np.asarray(x)
    n_sfd = int((brim0 >= 0).sum())
    x_sfd = np.empty((n_sfd, x.shape[1]), dtype=x.dtype)
    ids_sfd = np.empty((n_sfd, routing.k), dtype=np.int64)
    w_sfd = np.empty((n_sfd, routing.k))
    for d in range(brim0.shape[0]):
        tok = np.nonzero(brim0[d] >= 0)[0]
        dst = brim0[d, tok]
        x_sfd[dst] = x[tok]
        ids_sfd[dst] = routing.ids[tok]
        w_sfd[dst] = routing.weights[tok]
    return x_sfd, ids_sfd, w_sfd


@dataclass
class Received:
    """One destination device's SFD buffer after the first exchange."""

    x: np.ndarray
    ids: np.ndarray
    weights: np.ndarray
    origin: np.ndarray  # (n, 2): source device, row index in the source's SFD tensor


def all_to_all_exchange(sent: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]],
                        bytes_per_scalar: int = 4):
    """Route dispatched rows to their destination devices.

    ``sent[s]`` is ``(x_sfd, ids_sfd, w_sfd, brim0)`` for source device ``s``.
    Destinations receive rows in source order, then counter order. Only rows
    whose source differs from the destination are charged bytes.
    """
    n_dev = sent[0][3].shape[0] if sent else 0
    received = []
    moved = 0
    for d in range(n_dev):
        xs, ids, ws, origin = [], [], [], []
        for s, (x_sfd, ids_sfd, w_sfd, brim0) in enumerate(sent):
            rows = brim0[d][brim0[d] >= 0]
            xs.append(x_sfd[rows])
            ids.append(ids_sfd[rows])
            ws.append(w_sfd[rows])
            origin.append(np.stack([np.full(len(rows), s), rows], axis=1))
            if s != d:
                moved += len(rows) * x_sfd.shape[1]
        k = sent[0][1].shape[1]
        width = sent[0][0].shape[1]
        received.append(Received(
            np.concatenate(xs) if xs else np.zeros((0, width)),
            np.concatenate(ids) if ids else np.zeros((0, k), dtype=np.int64),
            np.concatenate(ws) if ws else np.zeros((0, k)),
            np.concatenate(origin).astype(np.int64) if origin else np.zeros((0, 2), dtype=np.int64),
        ))
    return received, moved * bytes_per_scalar


def return_exchange(outputs: list[np.ndarray], origins: list[np.ndarray], sfd_sizes: list[int],
                    bytes_per_scalar: int = 4):
    """Send per-destination results back to the SFD layout of each source."""
    width = next((o.shape[1] for o in outputs if o.ndim == 2), 0)
    dtype = outputs[0].dtype if outputs else np.float64
    back = [np.zeros((n, width), dtype=dtype) for n in sfd_sizes]
    moved = 0
    for d, (out, origin) in enumerate(zip(outputs, origins)):
        for s in range(len(sfd_sizes)):
            sel = origin[:, 0] == s
            back[s][origin[sel, 1]] = out[sel]
            if s != d:
                moved += int(sel.sum()) * width
    return back, moved * bytes_per_scalar


def combine(x_sfd_out: np.ndarray, brim0: np.ndarray, dtype=None) -> np.ndarray:
    """Sum each token's per-device partial results back into ORI order."""
    n_ori = brim0.shape[1]
    acc = np.zeros((n_ori, x_sfd_out.shape[1]))
    for d in range(brim0.shape[0]):
        tok = np.nonzero(brim0[d] >= 0)[0]
        acc[tok] += x_sfd_out[brim0[d, tok]]
    return acc.astype(dtype or x_sfd_out.dtype)


# --- sparse expert compute ---------------------------------------------------

def smm_scatter(x_sfd: np.ndarray, w: np.ndarray, brim1: np.ndarray, tiles: Tiles = Tiles(),
                dtype=None) -> np.ndarray:
    """``x_epd[brim1[e, t]] = x_sfd[t] @ w[e]`` for every non-negative entry."""
    x_sfd = np.asarray(x_sfd)
    w = np.asarray(w)
    if w.ndim != 3 or w.shape[0] != brim1.shape[0] or w.shape[1] != x_sfd.shape[1]:
        raise ShapeError(f"weights {w.shape} incompatible with tokens {x_sfd.shape} / index {brim1.shape}")
    if brim1.shape[1] != x_sfd.shape[0]:
        raise ShapeError(f"index covers {brim1.shape[1]} tokens, got {x_sfd.shape[0]}")
    n_epd = int((brim1 >= 0).sum())
    out = np.zeros((n_epd, w.shape[2]), dtype=dtype or x_sfd.dtype)
    for e in range(brim1.shape[0]):
        tok = np.nonzero(brim1[e] >= 0)[0]
        if tok.size:
            out[brim1[e, tok]] = tiled_matmul(x_sfd[tok], w[e], tiles)
    return out


def smm_merge(x_epd: np.ndarray, w: np.ndarray, brim1: np.ndarray, tiles: Tiles = Tiles(),
              dtype=None) -> np.ndarray:
    """``out[t] = sum_e x_epd[brim1[e, t]] @ w[e]``, experts summed in ascending order."""
    x_epd = np.asarray(x_epd)
    w = np.asarray(w)
    if w.ndim != 3 or w.shape[0] != brim1.shape[0] or w.shape[1] != x_epd.shape[1]:
        raise ShapeError(f"weights {w.shape} incompatible with tokens {x_epd.shape} / index {brim1.shape}")
    if int((brim1 >= 0).sum()) != x_epd.shape[0]:
        raise ShapeError(f"index addresses {(brim1 >= 0).sum()} rows, got {x_epd.shape[0]}")
    acc = np.zeros((brim1.shape[1], w.shape[2]))
    for e in range(brim1.shape[0]):
        tok = np.nonzero(brim1[e] >= 0)[0]
        if tok.size:
            acc[tok] += tiled_matmul(x_epd[brim1[e, tok]], w[e], tiles)
    return acc.astype(dtype or x_epd.dtype)


def weight_modulate(x_epd: np.ndarray, brim1: np.ndarray, brim_w: np.ndarray, dtype=None) -> np.ndarray:
    if brim_w.shape != brim1.shape:
        raise RoutingError(f"weights {brim_w.shape} do not cover index {brim1.shape}")
    scale = np.zeros(x_epd.shape[0])
    mask = brim1 >= 0
    scale[brim1[mask]] = brim_w[mask]
    return (x_epd.astype(np.float64) * scale[:, None]).astype(dtype or x_epd.dtype)


def smm_weight_grad(sfd_side: np.ndarray, epd_side: np.ndarray, brim1: np.ndarray,
                    tiles: Tiles = Tiles()) -> np.ndarray:
    """Per local expert ``e``: ``sfd_side[tok].T @ epd_side[brim1[e, tok]]``."""
    out = np.zeros((brim1.shape[0], sfd_side.shape[1], epd_side.shape[1]))
    for e in range(brim1.shape[0]):
        tok = np.nonzero(brim1[e] >= 0)[0]
        if tok.size:
            out[e] = tiled_matmul(sfd_side[tok].T, epd_side[brim1[e, tok]], tiles)
    return out


# --- orchestration -----------------------------------------------------------

@dataclass
class SourceShard:
    device: int
    tokens: np.ndarray  # global ORI indices held by this device
    brim0: np.ndarray
    sfd_rows: int


@dataclass
class DeviceShard:
    device: int
    local_experts: tuple[int, ...]
    x_sfd: np.ndarray
    local_ids: np.ndarray
    brim1: np.ndarray
    brim_w: np.ndarray
    origin: np.ndarray
    pre: np.ndarray  # EPD after the first projection, before activation
    act: np.ndarray  # EPD after activation, before modulation
    modulated: np.ndarray


@dataclass
class ForwardState:
    routing: RoutingOutcome
    placement: Placement
    experts: ExpertWeights
    tiles: Tiles
    dtype: np.dtype
    sources: list[SourceShard]
    devices: list[DeviceShard]
    num_tokens: int


@dataclass
class LayerResult:
    output: np.ndarray
    report: CommReport
    state: ForwardState
    routing: RoutingOutcome
    scores: np.ndarray | None = None


def shard_tokens(num_tokens: int, num_devices: int, mode: str = "round_robin") -> list[np.ndarray]:
    if mode == "round_robin":
        return [np.arange(s, num_tokens, num_devices) for s in range(num_devices)]
    if mode == "single":
        return [np.arange(num_tokens)] + [np.zeros(0, dtype=np.int64)] * (num_devices - 1)
    raise ValueError(f"unknown source sharding {mode!r}")


def forward_routed(x: np.ndarray, routing: RoutingOutcome, experts: ExpertWeights, placement: Placement,
                   *, tiles: Tiles = Tiles(), bytes_per_scalar: int | None = None,
                   sources: str = "round_robin", cap: float | None = None) -> LayerResult:
    """Run dispatch -> exchange -> expert compute -> exchange -> combine for a fixed routing."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != experts.d_in:
        raise ShapeError(f"tokens {x.shape} incompatible with expert input width {experts.d_in}")
    if routing.num_tokens != x.shape[0]:
        raise ShapeError(f"{routing.num_tokens} routing rows for {x.shape[0]} tokens")
    placement.validate(experts.num_experts)
    routing.validate(experts.num_experts)
    dtype = x.dtype
    bps = bytes_per_scalar if bytes_per_scalar is not None else dtype.itemsize
    n_dev = placement.num_devices

    src_shards, sent = [], []
    for s, tok in enumerate(shard_tokens(x.shape[0], n_dev, sources)):
        r = routing.slice(tok)
        brim0 = build_brim0(r, placement)
        x_sfd, ids_sfd, w_sfd = dispatch(x[tok], r, brim0)
        src_shards.append(SourceShard(s, tok, brim0, x_sfd.shape[0]))
        sent.append((x_sfd, ids_sfd, w_sfd, brim0))
    received, dispatch_bytes = all_to_all_exchange(sent, bps)

    shards, outputs = [], []
    for d, rec in enumerate(received):
        local = placement.devices[d]
        local_ids = localize_ids(rec.ids, local)
        brim1, brim_w = build_brim1(local_ids, local, rec.weights)
        w1 = experts.w1[list(local)]
        w2 = experts.w2[list(local)]
        pre = smm_scatter(rec.x, w1, brim1, tiles, dtype)
        act = activate(pre, experts.activation).astype(dtype)
        mod = weight_modulate(act, brim1, brim_w, dtype)
        out = smm_merge(mod, w2, brim1, tiles, dtype)
        shards.append(DeviceShard(d, local, rec.x, local_ids, brim1, brim_w, rec.origin, pre, act, mod))
        outputs.append(out)

    back, combine_bytes = return_exchange(outputs, [s.origin for s in shards],
                                          [s.sfd_rows for s in src_shards], bps)
    y = np.zeros((x.shape[0], experts.d_in), dtype=dtype)
    for src, part in zip(src_shards, back):
        y[src.tokens] = combine(part, src.brim0, dtype)

    n_sfd = sum(s.sfd_rows for s in src_shards)
    intra, inter = collaboration_shares(routing, placement)
    report = CommReport(
        mean_replicas=n_sfd / x.shape[0] if x.shape[0] else 0.0,
        cap_replicas=float(cap if cap is not None else min(routing.k, n_dev)),
        intra_share=intra,
        inter_share=inter,
        cross_device_bytes=int(dispatch_bytes),
        per_device_token_counts=[int(s.x_sfd.shape[0]) for s in shards],
        combine_bytes=int(combine_bytes),
        num_tokens=int(x.shape[0]),
        num_sfd_tokens=int(n_sfd),
        num_epd_tokens=int(sum(s.pre.shape[0] for s in shards)),
    )
    state = ForwardState(routing, placement, experts, tiles, dtype, src_shards, shards, x.shape[0])
    return LayerResult(y, report, state, routing)


def route(x: np.ndarray, gate: GateMatrix, cfg: MoEConfig, placement: Placement,
          prune: PruneSpec | None = None) -> tuple[RoutingOutcome, np.ndarray]:
    scores = gate_scores(x, gate)
    routing = topk_route(scores, cfg.top_k, cfg.renormalize)
    if prune is not None and prune.mode is not PruneMode.NONE:
        routing = prune_routing(routing, scores, placement, prune, cfg.renormalize)
    return routing, scores


def replica_cap(k: int, num_devices: int, prune: PruneSpec | None = None) -> int:
    cap = min(k, num_devices)
    if prune is not None and prune.mode is not PruneMode.NONE:
        cap = min(cap, prune.budget)
    return cap


def run_layer(x, gate: GateMatrix, experts: ExpertWeights, placement: Placement,
              prune: PruneSpec | None, cfg: MoEConfig, *, sources: str = "round_robin",
              bytes_per_scalar: int | None = None) -> LayerResult:
    if placement.num_devices != cfg.num_devices:
        raise PlacementError(f"placement has {placement.num_devices} devices, config {cfg.num_devices}")
    x = np.asarray(x, dtype=cfg.np_dtype)
    routing, scores = route(x, gate, cfg, placement, prune)
    res = forward_routed(x, routing, experts, placement, tiles=cfg.tiles, sources=sources,
                         bytes_per_scalar=bytes_per_scalar,
                         cap=replica_cap(cfg.top_k, cfg.num_devices, prune))
    res.scores = scores
    return res


def moe_forward_sparse(x, gate: GateMatrix, experts: ExpertWeights, placement: Placement,
                       prune: PruneSpec | None, cfg: MoEConfig):
    """Full layer forward; returns ``(output, CommReport)``."""
    res = run_layer(x, gate, experts, placement, prune, cfg)
    return res.output, res.report


# --- dense oracle --------------------------------------------------------------

def dense_from_routing(x: np.ndarray, routing: RoutingOutcome, experts: ExpertWeights) -> np.ndarray:
    """Per-token weighted sum of full expert evaluations, float64, plain loops."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((x.shape[0], experts.d_in))
    for t in range(x.shape[0]):
        for e, w in zip(routing.ids[t].tolist(), routing.weights[t].tolist()):
            out[t] += w * experts.expert(x[t:t + 1], e)[0]
    return out


def moe_forward_dense(x, gate: GateMatrix, experts: ExpertWeights, k: int, renormalize: bool = True) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != experts.d_in:
        raise ShapeError(f"tokens {x.shape} incompatible with expert input width {experts.d_in}")
    routing = topk_route(gate_scores(x, gate), k, renormalize)
    return dense_from_routing(x, routing, experts)


def max_relative_error(got: np.ndarray, ref: np.ndarray) -> float:
    """``max|got - ref| / max|ref|`` (absolute error when ``ref`` is all zero)."""
    got = np.asarray(got, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if got.shape != ref.shape:
        raise ShapeError(f"{got.shape} vs {ref.shape}")
    if ref.size == 0:
        return 0.0
    scale = np.abs(ref).max()
    diff = np.abs(got - ref).max()
    return float(diff / scale) if scale > 0 else float(diff)


# --- backward ------------------------------------------------------------------

@dataclass
class Gradients:
    x: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    weights: np.ndarray  # aligned with routing.weights
    extra: dict = field(default_factory=dict)


def _entries(brim: np.ndarray):
    for a, b in zip(*np.nonzero(brim >= 0)):
        yield (int(a), int(b)), int(brim[a, b])


def _sfd_owner(src: SourceShard) -> np.ndarray:
    """Global ORI token of every SFD row held by a source device."""
    owner = np.empty(src.sfd_rows, dtype=np.int64)
    for (_, t), r in _entries(src.brim0):
        owner[r] = src.tokens[t]
    return owner


def backward_vjps(grad_out: np.ndarray, state: ForwardState | None) -> Gradients:
    """Vector-Jacobian products of the layer for a fixed routing.

    Every adjoint reuses the forward index matrices: combine's adjoint is a
    dispatch, merge's adjoint is a scatter with ``w2`` transposed, scatter's
    adjoint is a merge with ``w1`` transposed and dispatch's adjoint is a
    combine.
    """
    if state is None or not state.devices:
        raise StateError("backward needs the saved forward state")
    g = np.asarray(grad_out, dtype=np.float64)
    ex = state.experts
    if g.shape != (state.num_tokens, ex.d_in):
        raise ShapeError(f"upstream gradient {g.shape} != output shape {(state.num_tokens, ex.d_in)}")
    tiles = state.tiles

    # combine adjoint: each SFD row receives its token's upstream gradient
    g_src = []
    for src in state.sources:
        gs = np.zeros((src.sfd_rows, ex.d_in))
        gt = g[src.tokens]
        for d in range(src.brim0.shape[0]):
            tok = np.nonzero(src.brim0[d] >= 0)[0]
            gs[src.brim0[d, tok]] = gt[tok]
        g_src.append(gs)

    owners = [_sfd_owner(src) for src in state.sources]
    gw1 = np.zeros(ex.w1.shape)
    gw2 = np.zeros(ex.w2.shape)
    g_weights = np.zeros(state.routing.weights.shape)
    g_in_dev = []
    for sh in state.devices:
        local = list(sh.local_experts)
        w1 = ex.w1[local].astype(np.float64)
        w2 = ex.w2[local].astype(np.float64)
        g_out = np.zeros((sh.x_sfd.shape[0], ex.d_in))
        for s, gs in enumerate(g_src):
            sel = sh.origin[:, 0] == s
            g_out[sel] = gs[sh.origin[sel, 1]]
        g_mod = smm_scatter(g_out, w2.transpose(0, 2, 1), sh.brim1, tiles, np.float64)
        gw2[local] += smm_weight_grad(g_out, sh.modulated.astype(np.float64), sh.brim1,
                                      tiles).transpose(0, 2, 1)

        scale = np.zeros(g_mod.shape[0])
        mask = sh.brim1 >= 0
        scale[sh.brim1[mask]] = sh.brim_w[mask]
        g_act = g_mod * scale[:, None]
        g_row_weight = np.einsum("ij,ij->i", g_mod, sh.act.astype(np.float64))
        for (e_loc, t), r in _entries(sh.brim1):
            token = owners[sh.origin[t, 0]][sh.origin[t, 1]]
            slot = int(np.nonzero(state.routing.ids[token] == local[e_loc])[0][0])
            g_weights[token, slot] = g_row_weight[r]

        g_pre = g_act * activate_grad(sh.pre.astype(np.float64), ex.activation)
        g_in_dev.append(smm_merge(g_pre, w1.transpose(0, 2, 1), sh.brim1, tiles, np.float64))
        gw1[local] += smm_weight_grad(sh.x_sfd.astype(np.float64), g_pre, sh.brim1, tiles)

    back, _ = return_exchange(g_in_dev, [sh.origin for sh in state.devices],
                              [src.sfd_rows for src in state.sources])
    gx = np.zeros((state.num_tokens, ex.d_in))
    for src, part in zip(state.sources, back):
        gx[src.tokens] = combine(part, src.brim0, np.float64)
    return Gradients(gx, gw1, gw2, g_weights)
