import math

import numpy as np
import pytest
import torch

from aamgame import tensor as tn
from aamgame.obsgraph import DEPOT, HIG_RELATIONS, PAYLOAD, VEHICLE, HeteroGraph, build_hig, observation
from aamgame.policy import (
    ARCHITECTURES,
    HetGATLayer,
    LearnedPolicy,
    PolicyNet,
    batch_graphs,
    masked_log_probs,
    policy_forward,
    sample_index,
)
from aamgame.sim import EpisodeConfig, make_world

from conftest import make_request, random_world, small_world

D = torch.float64


def permute_depots(hig, order):
    """Relabel depot nodes so that new depot i is old depot order[i]."""
    inv = np.argsort(order)
    edges = {}
    for rel, (src, dst) in hig.edges.items():
        s_type, d_type = HIG_RELATIONS[rel]
        src = inv[src] if s_type == DEPOT else src
        dst = inv[dst] if d_type == DEPOT else dst
        edges[rel] = (src, dst)
    feats = dict(hig.features)
    feats[DEPOT] = hig.features[DEPOT][order]
    return HeteroGraph(dict(hig.num_nodes), edges, feats)


def scores_of(model, graphs):
    with torch.no_grad():
        scores, values = model(batch_graphs(graphs, D))
    return scores, values


def random_observations(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        w = random_world(rng)
        vid = int(rng.integers(len(w.vehicles)))
        k_v = int(rng.integers(1, len(w.vehicles) + 1))
        k_d = int(rng.integers(1, len(w.depots) + 1))
        out.append(observation(w, vid, k_v, k_d))
    return out


def attention_sums(model, hig):
    rec = []
    with torch.no_grad():
        model(batch_graphs([hig], D), attention_out=rec)
    for layer in rec:
        for rel, (dst, beta) in layer.items():
            n = int(dst.max()) + 1
            yield rel, tn.segment_sum(beta, dst, n)[torch.bincount(dst, minlength=n) > 0]


@pytest.mark.parametrize("arch", ["encdec", "hetgat"])
def test_attention_sums_to_one(arch):
    model = PolicyNet(arch, dtype=D, seed=3)
    for hig, _ in random_observations(100):
        for rel, sums in attention_sums(model, hig):
            assert (sums - 1).abs().max().item() <= 1e-9, rel


def test_single_neighbor_gets_full_weight():
    layer = HetGATLayer({"communicates": (VEHICLE, VEHICLE)}, {VEHICLE: 3}, {VEHICLE: 4}, heads=2).double()
    layer.reset_parameters(torch.Generator().manual_seed(0))
    rec = {}
    edges = {"communicates": (torch.tensor([0]), torch.tensor([0]))}
    layer(edges, {VEHICLE: torch.randn(1, 3, dtype=D)}, {VEHICLE: 1}, rec)
    assert rec["communicates"][1].tolist() == [[1.0, 1.0]]


def test_equal_neighbors_split_evenly():
    layer = HetGATLayer({"communicates": (VEHICLE, VEHICLE)}, {VEHICLE: 3}, {VEHICLE: 4}, heads=2).double()
    layer.reset_parameters(torch.Generator().manual_seed(0))
    rec = {}
    feats = torch.tensor([[0.3, -1.0, 2.0]] * 2, dtype=D)
    edges = {"communicates": (torch.tensor([0, 1]), torch.tensor([0, 0]))}
    layer(edges, {VEHICLE: feats}, {VEHICLE: 2}, rec)
    assert rec["communicates"][1].tolist() == [[0.5, 0.5], [0.5, 0.5]]


def test_uniform_beta_identity_weights_give_mean_message():
    layer = HetGATLayer({"communicates": (VEHICLE, VEHICLE)}, {VEHICLE: 2}, {VEHICLE: 2}, heads=1,
                        attention=False, raw_types=(VEHICLE,)).double()
    with torch.no_grad():
        layer.W["communicates"].copy_(torch.eye(2, dtype=D).unsqueeze(0))
    f = torch.tensor([[1.0, 4.0], [3.0, -2.0]], dtype=D)
    edges = {"communicates": (torch.tensor([0, 1]), torch.tensor([0, 0]))}
    out = layer(edges, {VEHICLE: f}, {VEHICLE: 2})
    assert out[VEHICLE][0].tolist() == [2.0, 1.0]
    assert len(layer.attn) == 0 and len(layer.W_dst) == 0


def test_unknown_relation_rejected():
    layer = HetGATLayer({"communicates": (VEHICLE, VEHICLE)}, {VEHICLE: 2}, {VEHICLE: 2}, heads=1).double()
    layer.reset_parameters()
    with pytest.raises(KeyError):
        layer({"visits": (torch.tensor([0]), torch.tensor([0]))}, {VEHICLE: torch.zeros(1, 2, dtype=D)}, {VEHICLE: 1})


def test_hetgcn_has_no_attention_parameters():
    names = [n for n, _ in PolicyNet("hetgcn").named_parameters()]
    assert not any(".attn." in n or ".W_dst." in n for n in names)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_permutation_equivariance(arch):
    model = PolicyNet(arch, dtype=D, seed=1)
    rng = np.random.default_rng(5)
    for hig, _ in random_observations(30, seed=2):
        order = rng.permutation(hig.num_nodes[DEPOT])
        base, vb = scores_of(model, [hig])
        perm, vp = scores_of(model, [permute_depots(hig, order)])
        assert torch.equal(perm[0], base[0][order])
        assert torch.equal(vp, vb)


def test_encoder_widths_and_graph_embedding():
    model = PolicyNet("encdec", dtype=D)
    hig, _ = random_observations(1, seed=7)[0]
    h, g = model.encode(batch_graphs([hig], D))
    assert {t: x.shape[1] for t, x in h.items()} == {VEHICLE: 64, DEPOT: 64, PAYLOAD: 64}
    assert g.shape == (1, 192)


def test_empty_payload_block_is_zero():
    w = small_world(depots=[(0, 0), (5, 5)], vehicles=[((0, 0), 1, 0)])
    hig, _ = observation(w, 0, 1, 2)
    _, g = PolicyNet("encdec", dtype=D).encode(batch_graphs([hig], D))
    assert torch.count_nonzero(g[0, 128:]) == 0


def test_payload_order_leaves_graph_embedding_unchanged():
    w = small_world(depots=[(0, 0), (5, 5)], vehicles=[((0, 0), 3, 0)], clients=[(9, 9), (20, 3)])
    for i, (d, c, cap) in enumerate([(0, 2, 1), (0, 3, 2), (1, 2, 3)]):
        w.depots[d].queue.append(make_request(i, d, c, cap, world=w))
    hig, _ = observation(w, 0, 1, 2)
    order = np.array([2, 0, 1])
    inv = np.argsort(order)
    edges = {}
    for rel, (src, dst) in hig.edges.items():
        s_type, d_type = HIG_RELATIONS[rel]
        edges[rel] = (inv[src] if s_type == PAYLOAD else src, inv[dst] if d_type == PAYLOAD else dst)
    feats = dict(hig.features)
    feats[PAYLOAD] = hig.features[PAYLOAD][order]
    shuffled = HeteroGraph(dict(hig.num_nodes), edges, feats)
    model = PolicyNet("encdec", dtype=D)
    _, g1 = model.encode(batch_graphs([hig], D))
    _, g2 = model.encode(batch_graphs([shuffled], D))
    assert torch.allclose(g1, g2, rtol=0, atol=1e-12)


def test_twin_depots_split_evenly():
    feats = {
        VEHICLE: np.array([[0.1, 0.2, 0.1, 0.2, 2.0]]),
        DEPOT: np.array([[0.5, 0.5, 0.05, 2.0]] * 2),
        PAYLOAD: np.zeros((0, 4)),
    }
    from aamgame.obsgraph import Neighborhood

    hig = build_hig(Neighborhood(0, [0], [0, 1], []), 2, [2], feats)
    for arch in ARCHITECTURES:
        scores, _ = scores_of(PolicyNet(arch, dtype=D), [hig])
        probs = torch.softmax(scores, -1)
        assert probs[0].tolist() == [0.5, 0.5]


def test_zero_value_head_gives_zero():
    model = PolicyNet("encdec", dtype=D)
    with torch.no_grad():
        for p in model.fc_val.parameters():
            p.zero_()
    hig, _ = random_observations(1)[0]
    _, v = scores_of(model, [hig])
    assert v.item() == 0.0


def test_probabilities_over_ten_depots():
    cfg = EpisodeConfig(mode="on-demand", num_depots=10, num_clients=12)
    w = make_world(cfg, 0)
    out = policy_forward(w, 0, PolicyNet("encdec", dtype=D), 5, 5, use_mask=False)
    assert out.probabilities.shape == (10,)
    assert abs(out.probabilities.sum() - 1) <= 1e-12


def test_single_depot_gets_probability_one():
    w = small_world(depots=[(3, 3)], vehicles=[((0, 0), 1, 0)], clients=[(9, 9)])
    for arch in ARCHITECTURES:
        out = policy_forward(w, 0, PolicyNet(arch, dtype=D), 1, 1, use_mask=True)
        assert out.probabilities.tolist() == [1.0]


def test_policy_forward_deterministic():
    cfg = EpisodeConfig(mode="on-demand", num_depots=10, num_clients=12)
    w = make_world(cfg, 4)
    model = PolicyNet("encdec", dtype=D, seed=2)
    a = policy_forward(w, 1, model, 5, 5, True)
    b = policy_forward(w, 1, model, 5, 5, True)
    assert np.array_equal(a.probabilities, b.probabilities) and a.value == b.value


def test_hetgcn_distribution_valid():
    cfg = EpisodeConfig(mode="on-demand", num_depots=10, num_clients=12)
    out = policy_forward(make_world(cfg, 1), 0, PolicyNet("hetgcn", dtype=D), 5, 5, False)
    assert np.all(out.probabilities >= 0) and abs(out.probabilities.sum() - 1) < 1e-12


def mask_world():
    w = small_world(depots=[(0, 0), (4, 0), (20, 20)], vehicles=[((0, 0), 1, 0)], clients=[(9, 9)])
    w.depots[0].queue.append(make_request(0, 0, 3, 1, world=w))
    w.depots[1].queue.append(make_request(1, 1, 3, 3, world=w))
    return w


def test_masked_depot_probability_zero():
    out = policy_forward(mask_world(), 0, PolicyNet("encdec", dtype=D), 1, 2, use_mask=True)
    assert out.mask.tolist() == [False, True, False]
    assert out.probabilities[1] == 0.0
    assert out.probabilities[2] > 0.0


def test_masked_depot_gets_zero_gradient():
    scores = torch.randn(1, 3, dtype=D, requires_grad=True)
    mask = torch.tensor([[False, True, False]])
    logp = masked_log_probs(scores, mask)
    (logp[0, 0] + logp[0, 2]).backward()
    assert scores.grad[0, 1].item() == 0.0


def test_entropy_gradient_finite_under_mask():
    from aamgame.policy import entropy

    scores = torch.randn(2, 4, dtype=D, requires_grad=True)
    mask = torch.tensor([[False, True, True, False], [False, False, False, False]])
    ent = entropy(masked_log_probs(scores, mask))
    ent.sum().backward()
    assert torch.isfinite(ent).all() and torch.isfinite(scores.grad).all()
    assert ent[1].item() <= math.log(4) + 1e-12


def test_all_unsuitable_falls_back_to_unmasked():
    w = small_world(depots=[(0, 0), (4, 0)], vehicles=[((0, 0), 1, 0)], clients=[(9, 9)])
    w.depots[0].queue.append(make_request(0, 0, 2, 3, world=w))
    out = policy_forward(w, 0, PolicyNet("encdec", dtype=D), 1, 2, use_mask=True)
    assert not out.mask.any()
    assert np.all(out.probabilities > 0)


def test_parameter_shapes_independent_of_graph_size():
    model = PolicyNet("encdec", dtype=D)
    before = {n: p.shape for n, p in model.named_parameters()}
    w = mask_world()
    for i in range(2, 6):
        w.depots[0].queue.append(make_request(i, 0, 3, 1, world=w))
    hig, _ = observation(w, 0, 1, 3)
    scores_of(model, [hig])
    assert before == {n: p.shape for n, p in model.named_parameters()}


def test_batched_matches_single():
    model = PolicyNet("encdec", dtype=D, seed=4)
    higs = [h for h, _ in random_observations(6, seed=11) if h.num_nodes[DEPOT] == 3]
    if len(higs) < 2:
        higs = [h for h, _ in random_observations(40, seed=11) if h.num_nodes[DEPOT] == 3][:4]
    together, vt = scores_of(model, higs)
    for i, h in enumerate(higs):
        alone, va = scores_of(model, [h])
        assert torch.allclose(together[i], alone[0], atol=1e-12)
        assert torch.allclose(vt[i], va[0], atol=1e-12)


def test_info_lists_relations_and_counts():
    info = PolicyNet("encdec").info()
    assert info["encoder_relations"] == sorted(HIG_RELATIONS)
    assert info["parameter_count"] == sum(int(np.prod(s)) for s in info["parameters"].values())


def test_sample_index_never_picks_zero_probability():
    rng = np.random.default_rng(0)
    probs = np.array([0.0, 0.3, 0.0, 0.7, 0.0])
    picks = {sample_index(probs, rng) for _ in range(2000)}
    assert picks == {1, 3}


def test_learned_policy_respects_mask():
    w = mask_world()
    pol = LearnedPolicy(PolicyNet("encdec", dtype=D), 1, 2, use_mask=True)
    rng = np.random.default_rng(0)
    assert all(pol.act(w, [0], rng)[0] != 1 for _ in range(200))


def test_float32_model_runs():
    model = PolicyNet("encdec", dtype=torch.float32)
    hig, _ = random_observations(1)[0]
    scores, _ = model(batch_graphs([hig], torch.float32))
    assert scores.dtype == torch.float32 and torch.isfinite(scores).all()


def test_unknown_architecture():
    with pytest.raises(ValueError):
        PolicyNet("lstm")
