from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabmoe.core import ConfigError, ExpertWeights, Tiles
from collabmoe.pipeline import forward_routed, shard_tokens
from collabmoe.placement import random_placement, trivial_placement
from collabmoe.pruning import PruneSpec
from collabmoe.simnet import (
    ClusterSpec,
    FitError,
    ReplicationMode,
    baseline_replication_ct,
    fit_latency,
    link_seconds,
    run_cluster_forward,
    simulate_layer,
    simulate_routed,
)
from collabmoe.traces import zipf_trace

from conftest import two_device_fixture

OLMOE_POINTS = [(8, 24.50), (3.68, 15.93), (3.02, 12.53), (1.98, 9.22), (1, 5.82)]

def fit_oracle(points):
    pts = [(Fraction(str(a)), Fraction(str(b))) for a, b in points]
    n = len(pts)
    mx = sum(a for a, _ in pts) / n
    my = sum(b for _, b in pts) / n
    sxy = sum((a - mx) * (b - my) for a, b in pts)
    sxx = sum((a - mx) ** 2 for a, _ in pts)
    syy = sum((b - my) ** 2 for _, b in pts)
    slope = sxy / sxx
    return float(slope), float(my - slope * mx), float(sxy * sxy / (sxx * syy))


@pytest.mark.parametrize("accounting,prune,expected", [
    ("replicate_k", None, 2.0),
    ("dedup", None, 1.5),
    ("dedup", PruneSpec("router", 1), 1.0),
])
def test_two_device_workflow_fixture(accounting, prune, expected):
    model, x, pl = two_device_fixture()
    _, report = run_cluster_forward(x, model, pl, prune, ClusterSpec(2, accounting=accounting))
    assert report.mean_replicas == expected


def test_two_device_routing_realizes_intended_spans():
    model, x, pl = two_device_fixture()
    res = simulate_layer(x, model, pl, None, ClusterSpec(2))
    assert [sorted(r) for r in res.routing.ids.tolist()] == [[0, 1], [2, 3], [0, 2], [1, 3]]


def test_baseline_modes():
    rng = np.random.default_rng(0)
    r = zipf_trace(64, 8, 200, 1.0, rng)
    pl = trivial_placement(64, 4)
    assert baseline_replication_ct(r, pl, "replicate_k") == 8.0
    assert baseline_replication_ct(r, pl, "dedup") <= 4.0
    r1 = zipf_trace(8, 1, 30, 1.0, rng)
    pl1 = trivial_placement(8, 2)
    assert baseline_replication_ct(r1, pl1, "replicate_k") == baseline_replication_ct(r1, pl1, "dedup") == 1.0
    colo = trivial_placement(64, 1)
    assert baseline_replication_ct(r, colo, "dedup") == 1.0


def test_fit_olmoe_points_match_exact_oracle():
    fit = fit_latency(OLMOE_POINTS)
    slope, intercept, r2 = fit_oracle(OLMOE_POINTS)
    assert fit.slope == pytest.approx(slope, rel=1e-12)
    assert fit.intercept == pytest.approx(intercept, rel=1e-12)
    assert fit.r_squared == pytest.approx(r2, rel=1e-12)
    assert round(fit.slope, 2) == 2.62 and round(fit.intercept, 2) == 4.34


def test_fit_exact_line_and_two_points():
    fit = fit_latency([(x, 3 * x + 1) for x in (1, 2, 5, 9)])
    assert fit.slope == pytest.approx(3) and fit.intercept == pytest.approx(1) and fit.r_squared == pytest.approx(1)
    assert fit_latency([(1, 2), (2, 7)]).r_squared == pytest.approx(1)
    assert fit.predict(2) == pytest.approx(7)


def test_fit_degenerate():
    with pytest.raises(FitError):
        fit_latency([(2, 1), (2, 3)])
    with pytest.raises(FitError):
        fit_latency([(2, 1)])


def _brute_force_bytes(r, pl, n, width, bps, sources):
    dev = pl.device_of()
    total = 0
    for s, tok in enumerate(shard_tokens(n, pl.num_devices, sources)):
        for t in tok:
            total += sum(1 for d in set(dev[r.ids[t]].tolist()) if d != s)
    return total * width * bps


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n_d=st.sampled_from([1, 2, 4]), k=st.integers(1, 4),
       sources=st.sampled_from(["round_robin", "single"]), bps=st.sampled_from([2, 4, 8]))
def test_dispatch_bytes_match_brute_force(seed, n_d, k, sources, bps):
    rng = np.random.default_rng(seed)
    r = zipf_trace(8, k, 20, 1.0, rng)
    pl = random_placement(8, n_d, rng)
    ex = ExpertWeights(rng.standard_normal((8, 3, 2)), rng.standard_normal((8, 2, 3)))
    x = rng.standard_normal((20, 3))
    res = simulate_routed(x, r, ex, pl, ClusterSpec(n_d, bytes_per_scalar=bps, sources=sources))
    assert res.report.cross_device_bytes == _brute_force_bytes(r, pl, 20, 3, bps, sources)
    assert res.report.combine_bytes == res.report.cross_device_bytes


def test_output_independent_of_cluster_settings():
    rng = np.random.default_rng(1)
    r = zipf_trace(16, 4, 40, 1.0, rng)
    pl = trivial_placement(16, 4)
    ex = ExpertWeights(rng.standard_normal((16, 5, 6)), rng.standard_normal((16, 6, 5)))
    x = rng.standard_normal((40, 5))
    ref = forward_routed(x, r, ex, pl).output
    for cluster in (ClusterSpec(4, accounting="replicate_k"), ClusterSpec(4, sources="single"),
                    ClusterSpec(4, bytes_per_scalar=2, link_seconds_per_byte=1e-9)):
        out = simulate_routed(x, r, ex, pl, cluster, tiles=Tiles(2, 3, 4)).output
        assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_replicate_k_report_and_link_time():
    rng = np.random.default_rng(2)
    r = zipf_trace(8, 4, 10, 1.0, rng)
    pl = trivial_placement(8, 2)
    ex = ExpertWeights(rng.standard_normal((8, 3, 2)), rng.standard_normal((8, 2, 3)))
    cluster = ClusterSpec(2, accounting=ReplicationMode.REPLICATE_K, link_seconds_per_byte=0.5)
    rep = simulate_routed(rng.standard_normal((10, 3)), r, ex, pl, cluster).report
    assert rep.mean_replicas == 4.0 and rep.cap_replicas == 4.0
    assert link_seconds(rep, cluster) == (rep.cross_device_bytes + rep.combine_bytes) * 0.5
    assert link_seconds(rep, ClusterSpec(2)) is None


def test_cluster_device_mismatch():
    rng = np.random.default_rng(3)
    r = zipf_trace(8, 2, 4, 1.0, rng)
    ex = ExpertWeights(rng.standard_normal((8, 3, 2)), rng.standard_normal((8, 2, 3)))
    with pytest.raises(ConfigError):
        simulate_routed(rng.standard_normal((4, 3)), r, ex, trivial_placement(8, 2), ClusterSpec(4))
