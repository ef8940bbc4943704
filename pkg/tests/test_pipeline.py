import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabmoe.collab import measure_ct
from collabmoe.core import ExpertWeights, PlacementError, RoutingError, ShapeError, StateError, Tiles
from collabmoe.pipeline import (
    all_to_all_exchange,
    build_brim0,
    build_brim1,
    check_brim,
    combine,
    dense_from_routing,
    dispatch,
    forward_routed,
    localize_ids,
    max_relative_error,
    moe_forward_dense,
    moe_forward_sparse,
    smm_merge,
    smm_scatter,
    weight_modulate,
)
from collabmoe.placement import Placement, trivial_placement
from collabmoe.routing import RoutingOutcome
from collabmoe.traces import zipf_trace

from conftest import make_instance

PL = Placement(((0, 1), (2, 3)))
# token 0 -> device 0 only, token 1 -> both, token 2 -> device 1 only
R3 = RoutingOutcome(np.array([[0, 1], [1, 2], [3, 2]]), np.array([[0.5, 0.5], [0.7, 0.3], [0.6, 0.4]]))


def test_brim0_example():
    assert build_brim0(R3, PL).tolist() == [[0, 1, -1], [-1, 2, 3]]


def test_dispatch_example():
    x = np.arange(12, dtype=np.float64).reshape(3, 4)
    brim0 = build_brim0(R3, PL)
    x_sfd, ids, w = dispatch(x, R3, brim0)
    assert np.array_equal(x_sfd, x[[0, 1, 1, 2]])
    assert ids.tolist() == [[0, 1], [1, 2], [1, 2], [3, 2]]
    assert np.array_equal(w, R3.weights[[0, 1, 1, 2]])


def test_exchange_charges_only_remote_rows():
    x = np.ones((3, 4), dtype=np.float32)
    brim0 = build_brim0(R3, PL)
    sent0 = (*dispatch(x, R3, brim0), brim0)
    empty = RoutingOutcome.empty(2)
    b_empty = build_brim0(empty, PL)
    sent1 = (*dispatch(np.zeros((0, 4), np.float32), empty, b_empty), b_empty)
    received, moved = all_to_all_exchange([sent0, sent1], 4)
    # two rows go to device 1, 4 floats of 4 bytes each
    assert moved == 32
    assert received[0].x.shape[0] == 2 and received[1].x.shape[0] == 2
    assert received[1].origin.tolist() == [[0, 2], [0, 3]]


def test_brim1_example():
    local_ids = np.array([[0, 1], [1, -1]])
    brim1, bw = build_brim1(local_ids, [0, 1], np.array([[0.6, 0.4], [0.9, 0.1]]))
    assert brim1.tolist() == [[0, -1], [1, 2]]
    assert bw.tolist() == [[0.6, 0.0], [0.4, 0.9]]


def test_localize_ids():
    assert localize_ids(np.array([[1, 2], [3, 2]]), (2, 3)).tolist() == [[-1, 2], [3, 2]]


def test_brim1_rejects_token_without_local_expert():
    with pytest.raises(RoutingError):
        build_brim1(np.array([[-1, -1]]), [0, 1])


def test_brim0_rejects_unplaced_expert():
    with pytest.raises(PlacementError):
        build_brim0(RoutingOutcome(np.array([[0, 7]]), np.array([[0.5, 0.5]])), PL)


def test_check_brim():
    check_brim(np.array([[0, -1], [1, 2]]))
    with pytest.raises(StateError):
        check_brim(np.array([[1, -1], [0, 2]]))


def test_scatter_merge_modulate_combine_examples():
    brim1 = np.array([[0, -1], [1, 2]])
    x_sfd = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.stack([np.eye(2), 2 * np.eye(2)])
    x_epd = smm_scatter(x_sfd, w, brim1, Tiles(1, 1, 1))
    assert x_epd.tolist() == [[1, 2], [2, 4], [6, 8]]

    mod = weight_modulate(x_epd, brim1, np.array([[0.5, 0.0], [0.25, 1.0]]))
    assert mod.tolist() == [[0.5, 1], [0.5, 1], [6, 8]]

    merged = smm_merge(mod, w, brim1)
    assert merged.tolist() == [[1.5, 3], [12, 16]]

    brim0 = np.array([[0, 1, -1], [-1, 2, 3]])
    parts = np.array([[1.0], [2.0], [10.0], [5.0]])
    assert combine(parts, brim0).tolist() == [[1], [12], [5]]


def test_scatter_shape_errors():
    with pytest.raises(ShapeError):
        smm_scatter(np.zeros((2, 3)), np.zeros((2, 2, 2)), np.array([[0, -1], [1, 2]]))
    with pytest.raises(ShapeError):
        smm_merge(np.zeros((2, 2)), np.zeros((2, 2, 2)), np.array([[0, -1], [1, 2]]))


@pytest.mark.parametrize("n_e,k", [(8, 2), (64, 8)])
@pytest.mark.parametrize("n_d", [1, 2, 4])
def test_forward_matches_dense_oracle(n_e, k, n_d):
    cfg, experts, gate, x, pl = make_instance(n_e * 10 + n_d, n_e=n_e, k=k, n_d=n_d, tokens=24,
                                              activation="silu")
    out, report = moe_forward_sparse(x, gate, experts, pl, None, cfg)
    ref = moe_forward_dense(x, gate, experts, k)
    assert max_relative_error(out, ref) <= 1e-10
    assert report.num_sfd_tokens == round(report.mean_replicas * 24)


def test_float32_forward_within_tolerance():
    cfg, experts, gate, x, pl = make_instance(3, n_e=16, k=4, n_d=4, dtype="float32", tokens=40,
                                              activation="relu")
    out, _ = moe_forward_sparse(x, gate, experts, pl, None, cfg)
    assert out.dtype == np.float32
    assert max_relative_error(out, moe_forward_dense(x, gate, experts, 4)) <= 1e-4


def test_single_device_moves_no_bytes():
    cfg, experts, gate, x, pl = make_instance(1, n_d=1)
    _, report = moe_forward_sparse(x, gate, experts, pl, None, cfg)
    assert report.cross_device_bytes == 0 and report.combine_bytes == 0
    assert report.mean_replicas == 1.0


def test_large_expert_shape():
    # 64 experts, top-8, 4 devices with a wider hidden layer
    cfg, experts, gate, x, pl = make_instance(9, n_e=64, k=8, n_d=4, d=16, hidden=32, tokens=16,
                                              dtype="float32", tiles=(16, 16, 16))
    out, report = moe_forward_sparse(x, gate, experts, pl, None, cfg)
    assert out.shape == (16, 16)
    assert 2 <= report.mean_replicas <= 4
    assert max_relative_error(out, moe_forward_dense(x, gate, experts, 8)) <= 1e-4


def test_forward_is_deterministic():
    cfg, experts, gate, x, pl = make_instance(5, n_e=16, k=4, n_d=4, dtype="float32", tokens=30)
    a, ra = moe_forward_sparse(x, gate, experts, pl, None, cfg)
    b, rb = moe_forward_sparse(x, gate, experts, pl, None, cfg)
    assert a.tobytes() == b.tobytes() and ra.to_dict() == rb.to_dict()


@pytest.mark.parametrize("sources", ["round_robin", "single"])
def test_token_count_chain(sources):
    rng = np.random.default_rng(2)
    r = zipf_trace(16, 4, 50, 1.0, rng)
    pl = trivial_placement(16, 4)
    experts = ExpertWeights(rng.standard_normal((16, 3, 5)), rng.standard_normal((16, 5, 3)))
    res = forward_routed(rng.standard_normal((50, 3)), r, experts, pl, sources=sources)
    rep = res.report
    assert rep.num_sfd_tokens == sum(rep.per_device_token_counts)
    assert rep.mean_replicas == pytest.approx(measure_ct(r, pl))
    assert rep.num_epd_tokens == 50 * 4
    for src in res.state.sources:
        check_brim(src.brim0)
    for sh in res.state.devices:
        check_brim(sh.brim1)


def test_empty_batch():
    rng = np.random.default_rng(0)
    experts = ExpertWeights(rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 2, 3)))
    res = forward_routed(np.zeros((0, 3)), RoutingOutcome.empty(2), experts, PL)
    assert res.output.shape == (0, 3) and res.report.mean_replicas == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n_d=st.sampled_from([1, 2, 4]), k=st.integers(1, 4),
       tm=st.integers(1, 9), tk=st.integers(1, 9), tn=st.integers(1, 9))
def test_output_independent_of_tiles_and_placement(seed, n_d, k, tm, tk, tn):
    rng = np.random.default_rng(seed)
    r = zipf_trace(8, k, 15, 0.8, rng)
    x = rng.standard_normal((15, 4))
    experts = ExpertWeights(rng.standard_normal((8, 4, 6)), rng.standard_normal((8, 6, 4)))
    perm = rng.permutation(8)
    per = 8 // n_d
    pl = Placement(tuple(tuple(perm[d * per:(d + 1) * per]) for d in range(n_d)))
    a = forward_routed(x, r, experts, pl, tiles=Tiles(tm, tk, tn)).output
    b = forward_routed(x, r, experts, trivial_placement(8, 1)).output
    assert max_relative_error(a, dense_from_routing(x, r, experts)) <= 1e-12
    assert np.allclose(a, b, rtol=0, atol=1e-12)
