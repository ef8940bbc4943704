import numpy as np
import pytest

from collabmoe.collab import build_collab_graph, normalize_graph
from collabmoe.core import ExpertWeights, MoEConfig, Tiles, make_rng, random_experts
from collabmoe.placement import Placement, random_placement, reschedule_placement, trivial_placement
from collabmoe.routing import GateMatrix, gate_scores, topk_route
from collabmoe.simnet import Model


def make_instance(seed, n_e=8, k=2, n_d=2, d=5, hidden=7, tokens=12, dtype="float64",
                  placement="trivial", activation="identity", tiles=(4, 3, 5)):
    cfg = MoEConfig(num_experts=n_e, top_k=k, num_devices=n_d, embed_dim=d, hidden_dim=hidden,
                    tiles=Tiles(*tiles), seed=seed, activation=activation, dtype=dtype)
    rng = make_rng(seed)
    experts = random_experts(cfg, rng)
    gate = GateMatrix(rng.standard_normal((n_e, d)).astype(cfg.np_dtype))
    x = rng.standard_normal((tokens, d)).astype(cfg.np_dtype)
    if placement == "trivial":
        pl = trivial_placement(n_e, n_d)
    elif placement == "random":
        pl = random_placement(n_e, n_d, rng)
    else:
        r = topk_route(gate_scores(x, gate), k)
        pl = reschedule_placement(normalize_graph(build_collab_graph(r, n_e)).values, n_d)
    return cfg, experts, gate, x, pl


# Two devices holding experts {0,1} and {2,3}. Tokens 0 and 1 stay on one
# device, tokens 2 and 3 straddle both.
TWO_DEVICE_LOGITS = np.array([
    [3.0, 2.0, 0.0, -1.0],
    [-1.0, 0.0, 3.0, 2.0],
    [3.0, -1.0, 2.0, 0.0],
    [-1.0, 3.0, 0.0, 2.0],
])


def two_device_fixture():
    cfg = MoEConfig(num_experts=4, top_k=2, num_devices=2, embed_dim=4, hidden_dim=3, dtype="float64")
    rng = np.random.default_rng(0)
    experts = ExpertWeights(rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 3, 4)))
    model = Model(cfg, GateMatrix(TWO_DEVICE_LOGITS.T.copy()), experts)
    return model, np.eye(4), Placement(((0, 1), (2, 3)))


@pytest.fixture
def instance():
    return make_instance
