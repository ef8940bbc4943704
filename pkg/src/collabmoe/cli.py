"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 malformed data, 4 capacity or placement failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import formats
from .collab import (
    CollabGraph,
    build_collab_graph,
    collaboration_shares,
    ct_bounds,
    intra_inter_metrics,
    measure_ct,
    normalize_graph,
)
from .core import (
    Activation,
    CapacityError,
    ConfigError,
    MoEConfig,
    PlacementError,
    RoutingError,
    ShapeError,
    Tiles,
    make_rng,
    random_experts,
)
from .pipeline import dense_from_routing, max_relative_error, replica_cap, route
from .placement import Placement, random_placement, reschedule_placement, trivial_placement
from .pruning import PruneMode, PruneSpec, SimilarityAccumulator, SimilarityTable, WeightPolicy, prune_routing
from .routing import GateMatrix, router_logits
from .simnet import (
    ClusterSpec,
    FitError,
    Model,
    ReplicationMode,
    baseline_replication_ct,
    fit_latency,
    link_seconds,
    simulate_routed,
)
from .traces import generate

EXIT_USAGE, EXIT_DATA, EXIT_CAPACITY = 2, 3, 4


class UsageError(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# --- gen-trace -------------------------------------------------------------------

def cmd_gen_trace(args) -> int:
    routing, meta = generate(args.kind, args.experts, args.top_k, args.tokens, args.seed,
                             alpha=args.alpha, num_blocks=args.blocks, p_in=args.p_in)
    _emit(formats.dump_trace(routing, args.experts, args.model, meta), args.out)
    return 0


# --- profile ----------------------------------------------------------------------

def cmd_profile(args) -> int:
    routing, header = formats.read_trace(args.trace)
    n_e = int(header["num_experts"])
    counts = build_collab_graph(routing, n_e)
    norm = normalize_graph(counts)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_matrix(out / "counts.txt", counts.counts)
    formats.write_matrix(out / "norm.txt", norm.values)

    sections = {"trace": {"num_experts": n_e, "top_k": routing.k, "num_tokens": routing.num_tokens,
                          "pair_events": int(counts.counts.sum() // 2)}}
    placement = None
    if args.placement:
        placement = formats.read_placement(args.placement)
    elif args.devices:
        placement = trivial_placement(n_e, args.devices)
    if placement is not None:
        placement.validate(n_e)
        lo, hi = ct_bounds(routing.k, n_e, placement.num_devices)
        intra, inter = intra_inter_metrics(norm, placement)
        share_in, share_out = collaboration_shares(routing, placement)
        sections["placement"] = {"devices": placement.to_lists()}
        sections["bounds"] = {"lower": lo, "upper": hi}
        sections["replicas"] = {"mean": measure_ct(routing, placement),
                                "replicate_k": baseline_replication_ct(routing, placement)}
        sections["collaboration"] = {"intra_share": share_in, "inter_share": share_out,
                                     "intra": intra, "inter": inter}
    formats.write_report(out / "metrics.jsonl", sections)
    return 0


# --- reschedule ---------------------------------------------------------------------

def cmd_reschedule(args) -> int:
    graph = formats.read_matrix(args.graph)
    if graph.shape[0] != graph.shape[1]:
        raise formats.FormatError(f"line 1: graph must be square, got {graph.shape}")
    p = normalize_graph(CollabGraph(graph)).values
    placement = reschedule_placement(p, args.devices)
    _emit(formats.dump_placement(placement), args.out)
    return 0


# --- simulate / sweep-prune --------------------------------------------------------

def _config(args) -> MoEConfig:
    return MoEConfig(
        num_experts=args.experts, top_k=args.top_k, num_devices=args.devices,
        embed_dim=args.embed_dim, hidden_dim=args.hidden_dim, tiles=Tiles(*args.tiles),
        seed=args.seed, renormalize=not args.no_renormalize,
        activation=Activation(args.activation), dtype=args.dtype,
    )


def _build(args):
    """Seed-built model, tokens and base routing (from a trace or the gate)."""
    trace = None
    if args.trace:
        trace, header = formats.read_trace(args.trace)
        args.experts, args.top_k = int(header["num_experts"]), trace.k
        args.tokens = trace.num_tokens
    cfg = _config(args)
    rng = make_rng(args.seed)
    experts = random_experts(cfg, rng)
    gate = GateMatrix(rng.standard_normal((cfg.num_experts, cfg.embed_dim)).astype(cfg.np_dtype))
    x = rng.standard_normal((args.tokens, cfg.embed_dim)).astype(cfg.np_dtype)
    return cfg, rng, Model(cfg, gate, experts), x, trace


def _placement(args, cfg: MoEConfig, rng, base_routing) -> Placement:
    if args.placement_file:
        p = formats.read_placement(args.placement_file)
        p.validate(cfg.num_experts)
        if p.num_devices != cfg.num_devices:
            raise PlacementError(f"placement file has {p.num_devices} devices, --devices is {cfg.num_devices}")
        return p
    if args.placement == "trivial":
        return trivial_placement(cfg.num_experts, cfg.num_devices)
    if args.placement == "random":
        return random_placement(cfg.num_experts, cfg.num_devices, rng)
    if args.graph:
        graph = formats.read_matrix(args.graph)
    else:
        graph = build_collab_graph(base_routing, cfg.num_experts).counts
    return reschedule_placement(normalize_graph(CollabGraph(graph)).values, cfg.num_devices)


def _similarity_table(args, model: Model, x) -> SimilarityTable:
    if args.table:
        return SimilarityTable.from_values(formats.read_matrix(args.table))
    acc = SimilarityAccumulator(model.cfg.num_experts)
    for i in range(0, x.shape[0], 256):
        acc.update(router_logits(x[i:i + 256], model.gate))
    return acc.table()


def _simulate_one(args, cfg, model: Model, x, trace, placement: Placement, prune: PruneSpec,
                  cluster: ClusterSpec) -> dict:
    if trace is not None:
        if prune.mode is PruneMode.ROUTER:
            raise UsageError("router-score pruning needs gate scores; not available with --trace")
        routing = prune_routing(trace, None, placement, prune, cfg.renormalize)
    else:
        routing, _ = route(x, model.gate, cfg, placement, prune)
    res = simulate_routed(x, routing, model.experts, placement, cluster, tiles=cfg.tiles,
                          cap=replica_cap(cfg.top_k, cfg.num_devices, prune))
    report = res.report
    lo, hi = ct_bounds(cfg.top_k, cfg.num_experts, cfg.num_devices)
    norm = normalize_graph(build_collab_graph(routing, cfg.num_experts))
    intra, inter = intra_inter_metrics(norm, placement)
    sections = {
        "config": {"experts": cfg.num_experts, "top_k": cfg.top_k, "devices": cfg.num_devices,
                   "embed_dim": cfg.embed_dim, "hidden_dim": cfg.hidden_dim, "tokens": int(x.shape[0]),
                   "tiles": [cfg.tiles.m, cfg.tiles.k, cfg.tiles.n], "seed": cfg.seed, "dtype": cfg.dtype,
                   "activation": cfg.activation.value, "renormalize": cfg.renormalize,
                   "placement": args.placement_file or args.placement, "trace": args.trace,
                   "prune": prune.mode.value, "budget": prune.budget if prune.mode is not PruneMode.NONE else None,
                   "weight_policy": prune.weight_policy.value, "sources": cluster.sources,
                   "accounting": cluster.accounting.value, "bytes_per_scalar": cluster.bytes_per_scalar},
        "comm": {**report.to_dict(), "link_seconds": link_seconds(report, cluster)},
        "bounds": {"lower": lo, "upper": hi},
        "placement": {"devices": placement.to_lists()},
        "collaboration": {"intra": intra, "inter": inter},
    }
    if args.check_oracle:
        ref = dense_from_routing(x, routing, model.experts)
        sections["oracle"] = {"max_relative_error": max_relative_error(res.output, ref)}
    return sections


def _prepare(args):
    cfg, rng, model, x, trace = _build(args)
    base = trace if trace is not None else route(x, model.gate, cfg, trivial_placement(cfg.num_experts, cfg.num_devices))[0]
    placement = _placement(args, cfg, rng, base)
    cluster = ClusterSpec(cfg.num_devices, args.bytes_per_scalar or cfg.np_dtype.itemsize,
                          args.link_seconds_per_byte, args.sources, args.accounting)
    return cfg, model, x, trace, placement, cluster


def _prune_spec(args, model, x, budget: int) -> PruneSpec:
    mode = PruneMode(args.prune)
    table = _similarity_table(args, model, x) if mode is PruneMode.SIMILARITY else None
    return PruneSpec(mode, budget, table, WeightPolicy(args.weight_policy))


def cmd_simulate(args) -> int:
    cfg, model, x, trace, placement, cluster = _prepare(args)
    prune = _prune_spec(args, model, x, args.budget)
    sections = _simulate_one(args, cfg, model, x, trace, placement, prune, cluster)
    _emit(formats.dump_report(sections), args.out)
    return 0


def cmd_sweep_prune(args) -> int:
    if args.prune == "none":
        raise UsageError("sweep-prune needs --prune router or --prune similarity")
    cfg, model, x, trace, placement, cluster = _prepare(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for d in range(1, cfg.num_devices + 1):
        prune = _prune_spec(args, model, x, d)
        sections = _simulate_one(args, cfg, model, x, trace, placement, prune, cluster)
        formats.write_report(out / f"report_d{d}.jsonl", sections)
        comm = sections["comm"]
        lines.append(f"budget={d} mean_replicas={comm['mean_replicas']!r} "
                     f"cross_device_bytes={comm['cross_device_bytes']}\n")
    sys.stdout.write("".join(lines))
    return 0


# --- fit-latency --------------------------------------------------------------------

def cmd_fit_latency(args) -> int:
    if args.olmoe:
        points = formats.bundled_olmoe_points()
    elif args.points:
        points = formats.read_points(args.points)
    else:
        raise UsageError("give a points file or --olmoe")
    fit = fit_latency(points)
    sections = {"points": {"ct": [p[0] for p in points], "seconds": [p[1] for p in points]},
                "fit": {"slope": fit.slope, "intercept": fit.intercept, "r_squared": fit.r_squared}}
    _emit(formats.dump_report(sections), args.out)
    return 0


# --- parser ----------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--experts", type=int, default=8)
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--devices", type=int, default=2)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--tiles", type=int, nargs=3, default=[16, 16, 16], metavar=("M", "K", "N"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--activation", choices=[a.value for a in Activation], default="identity")
    p.add_argument("--no-renormalize", action="store_true", help="keep raw softmax weights after top-k")
    p.add_argument("--trace", help="routing trace; replaces gate routing")
    p.add_argument("--placement", choices=["trivial", "rescheduled", "random"], default="trivial")
    p.add_argument("--placement-file")
    p.add_argument("--graph", help="collaboration matrix used for --placement rescheduled")
    p.add_argument("--prune", choices=[m.value for m in PruneMode], default="none")
    p.add_argument("--weight-policy", choices=[w.value for w in WeightPolicy], default="inherit")
    p.add_argument("--table", help="similarity matrix file for --prune similarity")
    p.add_argument("--check-oracle", action="store_true")
    p.add_argument("--sources", choices=["round_robin", "single"], default="round_robin")
    p.add_argument("--accounting", choices=[m.value for m in ReplicationMode], default="dedup")
    p.add_argument("--bytes-per-scalar", type=int)
    p.add_argument("--link-seconds-per-byte", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="write a seeded synthetic routing trace")
    p.add_argument("--kind", choices=["uniform", "zipf", "planted"], default="uniform")
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--top-k", type=int, required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--p-in", type=float, default=0.9)
    p.add_argument("--model")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile", help="collaboration graphs and metrics from a trace")
    p.add_argument("trace")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--devices", type=int)
    p.add_argument("--placement")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("reschedule", help="collaboration-aware placement from a graph file")
    p.add_argument("graph")
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reschedule)

    p = sub.add_parser("simulate", help="run one layer on the simulated cluster")
    _model_flags(p)
    p.add_argument("--budget", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-prune", help="one simulate report per device budget")
    _model_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep_prune)

    p = sub.add_parser("fit-latency", help="least-squares latency vs. mean replicas")
    p.add_argument("points", nargs="?")
    p.add_argument("--olmoe", action="store_true", help="use the bundled OLMoE latency points")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_latency)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FitError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CapacityError as exc:
        print(f"capacity error: {exc} (budget too small for k; raise --budget or lower --top-k)",
              file=sys.stderr)
        return EXIT_CAPACITY
    except PlacementError as exc:
        print(f"placement error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except formats.FormatError as exc:
        src = getattr(args, "trace", None) or getattr(args, "graph", None) or getattr(args, "points", None)
        print(f"data error: {src + ': ' if src else ''}{exc}", file=sys.stderr)
        return EXIT_DATA
    except (RoutingError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
