import json
import math

import numpy as np
import pytest

from topoedge.embed import (
    DimensionMismatch,
    EmbedError,
    StaleCache,
    backward,
    build_plan,
    forward,
    hidden_dims,
    init_live_net,
    init_net,
    load_checkpoint,
    save_checkpoint,
)
from topoedge.graph import build_graph, build_edge_adjacency, node_attr_from_edges


def random_graph(seed, n_nodes=6, n_edges=10, dim=5):
    rng = np.random.default_rng(seed)
    nodes = [(f"n{i}", []) for i in range(n_nodes)]
    edges = []
    for _ in range(n_edges):
        u, v = rng.integers(0, n_nodes, size=2)
        attr = rng.uniform(size=dim).tolist()
        edges.append((f"n{u}", f"n{v}", attr, "normal"))
    return node_attr_from_edges(build_graph(nodes, edges))


def graph_inputs(g):
    plan = build_plan(g, build_edge_adjacency(g))
    return g.edge_attr_matrix(), plan


def numeric_gradients(net, X, plan, G, h=1e-5, rng_seed=None):
    """Central differences of sum(logits * G) per parameter entry."""

    def objective():
        rng = None if rng_seed is None else np.random.default_rng(rng_seed)
        logits, _ = forward(net, X, plan, train=rng_seed is not None, rng=rng)
        return float(np.sum(logits * G))

    grads = []
    for P in net.parameters():
        gP = np.zeros_like(P)
        it = np.nditer(P, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = P[idx]
            P[idx] = orig + h
            up = objective()
            P[idx] = orig - h
            down = objective()
            P[idx] = orig
            gP[idx] = (up - down) / (2.0 * h)
        grads.append(gP)
    return grads


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, f in zip(analytic, numeric):
        denom = np.maximum(1e-6, np.maximum(np.abs(a), np.abs(f)))
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


def live_net(g, X, plan, train_seed=None, **flags):
    """First init seed whose pre-activations all clear the relu kink.

    Central differences step across z = 0 for units within h of the kink,
    so the check only makes sense on a network with a margin there.
    """
    for seed in range(50):
        net = init_net(g.edge_dim, seed=seed, **flags)
        rng = (np.random.default_rng(train_seed)
               if train_seed is not None else None)
        logits, cache = forward(net, X, plan,
                                train=train_seed is not None, rng=rng)
        margin = min(float(np.min(np.abs(lc.Z))) for lc in cache.layers)
        if margin > 1e-3 and float(np.abs(logits).max()) > 1e-3:
            return net
    raise AssertionError("no init seed cleared the relu-kink margin")


@pytest.mark.parametrize("use_weights", [True, False])
@pytest.mark.parametrize("use_disentangle", [True, False])
def test_gradients_match_finite_differences(use_weights, use_disentangle):
    g = random_graph(seed=42)
    X, plan = graph_inputs(g)
    net = live_net(g, X, plan, use_weights=use_weights,
                   use_disentangle=use_disentangle, dropout_rate=0.0)
    rng = np.random.default_rng(7)
    G = rng.normal(size=(g.edge_count, 2))
    logits, cache = forward(net, X, plan)
    analytic = backward(net, plan, cache, G).parameters()
    numeric = numeric_gradients(net, X, plan, G)
    assert max_rel_err(analytic, numeric) <= 1e-4


def test_gradients_with_dropout_mask():
    g = random_graph(seed=5, n_edges=8)
    X, plan = graph_inputs(g)
    net = live_net(g, X, plan, train_seed=11, dropout_rate=0.5)
    G = np.random.default_rng(3).normal(size=(g.edge_count, 2))
    logits, cache = forward(net, X, plan, train=True,
                            rng=np.random.default_rng(11))
    analytic = backward(net, plan, cache, G).parameters()
    numeric = numeric_gradients(net, X, plan, G, rng_seed=11)
    assert max_rel_err(analytic, numeric) <= 1e-4


def test_zero_logit_gradient_gives_zero_parameter_gradients():
    g = random_graph(seed=0)
    X, plan = graph_inputs(g)
    net = init_net(g.edge_dim, seed=4)
    _, cache = forward(net, X, plan)
    grads = backward(net, plan, cache, np.zeros((g.edge_count, 2)))
    assert all(not group.any() for group in grads.parameters())


def test_permutation_equivariance():
    rng = np.random.default_rng(13)
    nodes = [(f"n{i}", []) for i in range(5)]
    edges = []
    for _ in range(9):
        u, v = rng.integers(0, 5, size=2)
        edges.append((f"n{u}", f"n{v}", rng.uniform(size=4).tolist(), "normal"))
    perm = list(rng.permutation(len(edges)))
    g1 = node_attr_from_edges(build_graph(nodes, edges))
    g2 = node_attr_from_edges(build_graph(nodes, [edges[p] for p in perm]))
    net = init_net(4, seed=6)
    l1, _ = forward(net, *graph_inputs(g1))
    l2, _ = forward(net, *graph_inputs(g2))
    assert np.allclose(l2, l1[perm], atol=1e-9)


def test_far_edges_cannot_influence_logits():
    # Path of 10 edges, 2 message rounds: edge 0 sees only edges 0..2.
    def path_graph(last_attr):
        nodes = [(f"n{i}", []) for i in range(11)]
        edges = [(f"n{i}", f"n{i + 1}", [0.1 * i, 0.5, 0.9 - 0.05 * i], "normal")
                 for i in range(10)]
        key_a, key_b, _, label = edges[9]
        edges[9] = (key_a, key_b, last_attr, label)
        return node_attr_from_edges(build_graph(nodes, edges))

    # Positive params and nonnegative inputs keep every relu active.
    net = init_net(3, seed=8)
    for layer in net.layers + [net.head]:
        layer.W[...] = 0.05
        layer.b[...] = 0.01
    base, _ = forward(net, *graph_inputs(path_graph([0.9, 0.5, 0.45])))
    moved, _ = forward(net, *graph_inputs(path_graph([0.2, 0.1, 0.0])))
    assert np.array_equal(base[0], moved[0])
    assert not np.array_equal(base[9], moved[9])


def test_beta_is_cosine_of_outer_node_attrs():
    nodes = [("a", [1.0, 1.0]), ("s", [4.0, 7.0]), ("b", [1.0, 0.0])]
    edges = [("a", "s", [0.3], "normal"), ("s", "b", [0.4], "normal")]
    g = build_graph(nodes, edges)
    plan = build_plan(g, build_edge_adjacency(g))
    assert plan.beta == pytest.approx([1 / math.sqrt(2)] * 2)
    assert list(plan.src) == [1, 0]
    assert list(plan.dst) == [0, 1]


def test_beta_zero_for_zero_norm_outer_node():
    nodes = [("a", [0.0, 0.0]), ("s", [1.0, 1.0]), ("b", [1.0, 0.0])]
    edges = [("a", "s", [0.3], "normal"), ("s", "b", [0.4], "normal")]
    g = build_graph(nodes, edges)
    plan = build_plan(g, build_edge_adjacency(g))
    assert list(plan.beta) == [0.0, 0.0]


def test_uniform_ring_gives_uniform_logits():
    nodes = [(f"n{i}", []) for i in range(6)]
    edges = [(f"n{i}", f"n{(i + 1) % 6}", [0.5, 0.25], "normal")
             for i in range(6)]
    g = node_attr_from_edges(build_graph(nodes, edges))
    for use_weights in (True, False):
        net = init_net(2, use_weights=use_weights, seed=9)
        logits, _ = forward(net, *graph_inputs(g))
        assert np.array_equal(logits, np.tile(logits[0], (6, 1)))


def test_isolated_edges_get_head_bias():
    nodes = [("a", []), ("b", []), ("c", []), ("d", [])]
    edges = [("a", "b", [0.1, 0.2], "normal"), ("c", "d", [0.8, 0.9], "normal")]
    g = node_attr_from_edges(build_graph(nodes, edges))
    net = init_net(2, seed=0)
    for P in net.parameters():
        P[...] = 0.0
    net.head.b[:] = [0.3, -0.2]
    logits, _ = forward(net, *graph_inputs(g))
    assert np.array_equal(logits, np.array([[0.3, -0.2]] * 2))


def test_hidden_dims():
    assert hidden_dims(16) == (4, 2)
    assert hidden_dims(3) == (1, 1)
    assert hidden_dims(40) == (10, 5)


def test_init_live_net_keeps_first_live_draw():
    g = random_graph(seed=42)
    X, plan = graph_inputs(g)
    for seed in range(20):
        base = init_net(g.edge_dim, dropout_rate=0.0, seed=seed)
        _, cache = forward(base, X, plan)
        if all((lc.Z > 0.0).any() for lc in cache.layers):
            break
    else:
        pytest.fail("no live init seed in range")
    net = init_live_net(g.edge_dim, X, plan, dropout_rate=0.0, seed=seed)
    for a, b in zip(net.parameters(), base.parameters()):
        assert np.array_equal(a, b)


def test_init_shapes_and_bias_zero():
    net = init_net(16, seed=3)
    assert net.layers[0].W.shape == (4, 32)
    assert net.layers[1].W.shape == (2, 8)
    assert net.head.W.shape == (2, 2)
    assert all(not l.b.any() for l in net.layers + [net.head])
    bound = math.sqrt(6.0 / (32 + 4))
    assert np.abs(net.layers[0].W).max() <= bound
    assert not np.array_equal(net.layers[0].W, init_net(16, seed=4).layers[0].W)


def test_dropout_determinism_and_eval_mode():
    g = random_graph(seed=1)
    X, plan = graph_inputs(g)
    net = init_net(g.edge_dim, dropout_rate=0.5, seed=5)
    for layer in net.layers + [net.head]:
        layer.W[...] = 0.05
        layer.b[...] = 0.01
    a, _ = forward(net, X, plan, train=True, rng=np.random.default_rng(21))
    b, _ = forward(net, X, plan, train=True, rng=np.random.default_rng(21))
    c, _ = forward(net, X, plan, train=True, rng=np.random.default_rng(22))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    eval_1, _ = forward(net, X, plan)
    eval_2, _ = forward(net, X, plan, train=False)
    assert np.array_equal(eval_1, eval_2)
    with pytest.raises(EmbedError):
        forward(net, X, plan, train=True)


def test_stale_cache_rejected():
    g = random_graph(seed=2)
    X, plan = graph_inputs(g)
    net = init_net(g.edge_dim, seed=1)
    _, cache = forward(net, X, plan)
    net.mark_updated()
    with pytest.raises(StaleCache):
        backward(net, plan, cache, np.zeros((g.edge_count, 2)))


def test_dimension_mismatches():
    g = random_graph(seed=2)
    X, plan = graph_inputs(g)
    net = init_net(g.edge_dim, seed=1)
    with pytest.raises(DimensionMismatch):
        forward(net, X[:, :-1], plan)
    with pytest.raises(DimensionMismatch):
        forward(net, X[:-1], plan)
    _, cache = forward(net, X, plan)
    with pytest.raises(DimensionMismatch):
        backward(net, plan, cache, np.zeros((g.edge_count, 3)))


def test_checkpoint_round_trip(tmp_path):
    g = random_graph(seed=3)
    X, plan = graph_inputs(g)
    net = init_net(g.edge_dim, use_weights=False, dropout_rate=0.2, seed=7)
    path = tmp_path / "ckpt.json"
    save_checkpoint(net, path, extra={"epoch": 12})
    loaded, extra = load_checkpoint(path)
    assert extra == {"epoch": 12}
    assert loaded.use_weights is False and loaded.use_disentangle is True
    assert loaded.dropout_rate == 0.2
    a, _ = forward(net, X, plan)
    b, _ = forward(loaded, X, plan)
    assert np.array_equal(a, b)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.json"
    path.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(EmbedError):
        load_checkpoint(path)
