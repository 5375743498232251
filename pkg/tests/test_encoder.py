import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import complete_graph, random_graph
from graphood.data import Graph
from graphood.encoder import (
    EncoderConfig,
    EncoderParams,
    classify,
    classify_graphs,
    encode_graph,
    encode_graphs,
    init_params,
    loss_and_gradients,
    normalize_adjacency,
    train_classifier,
)
from graphood.errors import ContractError, TrainingError
from oracles import dense_embed, dense_loss, dense_probs, finite_difference, softmax


def with_arrays(p: EncoderParams, arrays) -> EncoderParams:
    L = p.config.num_layers
    return EncoderParams(p.config, p.input_dim, list(arrays[:L]), list(arrays[L:2 * L]), arrays[-2], arrays[-1],
                         p.history)


def fixture_graph():
    # 5 nodes: a triangle 0-1-2 with a tail 2-3-4
    x = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, -0.5], [1.0, 1.0, 0.0], [0.2, -1.0, 2.0], [0.0, 0.0, 1.0]])
    return Graph(x, [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)], 1, 0)


# --------------------------------------------------------------------------- propagation


def test_normalize_adjacency_examples():
    np.testing.assert_allclose(normalize_adjacency(Graph(np.ones((1, 1)), [], 0, 0)), [[1.0]])
    np.testing.assert_allclose(normalize_adjacency(complete_graph(2)), np.full((2, 2), 0.5), atol=1e-15)
    np.testing.assert_allclose(normalize_adjacency(complete_graph(3)), np.full((3, 3), 1 / 3), atol=1e-15)


@given(st.integers(1, 10), st.integers(0, 10_000))
def test_normalized_adjacency_symmetric_with_unit_eigenvalue_bound(n, seed):
    g = random_graph(np.random.default_rng(seed), n)
    a = normalize_adjacency(g)
    np.testing.assert_allclose(a, a.T, atol=1e-15)
    assert np.max(np.abs(np.linalg.eigvalsh(a))) <= 1 + 1e-12


# --------------------------------------------------------------------------- forward pass


@pytest.mark.parametrize("propagation", ["gcn", "sum"])
def test_embedding_matches_dense_oracle(propagation):
    cfg = EncoderConfig(num_layers=2, hidden_dim=4, output_dim=3, seed=7, propagation=propagation)
    p = init_params(cfg, 3)
    g = fixture_graph()
    np.testing.assert_allclose(encode_graph(p, g), dense_embed(p.arrays(), 2, g, propagation), atol=1e-10)
    np.testing.assert_allclose(classify(p, g), dense_probs(p.arrays(), 2, g, propagation), atol=1e-10)


def test_zero_weights_give_zero_embedding():
    p = init_params(EncoderConfig(hidden_dim=5, output_dim=2), 3)
    zero = with_arrays(p, [np.zeros_like(a) for a in p.arrays()])
    np.testing.assert_array_equal(encode_graph(zero, fixture_graph()), np.zeros(5))


def test_single_node_embedding_is_its_node_vector():
    cfg = EncoderConfig(num_layers=1, hidden_dim=4, seed=3)
    p = init_params(cfg, 3)
    x = np.array([[0.3, -1.2, 2.0]])
    g = Graph(x, [], 0, 0)
    # self-loop only: the normalised adjacency is [1]
    expected = np.maximum(x @ p.conv_weights[0] + p.conv_biases[0], 0.0)[0]
    np.testing.assert_allclose(encode_graph(p, g), expected, atol=1e-12)


def test_classify_head_examples():
    p = init_params(EncoderConfig(hidden_dim=4, output_dim=4), 3)
    arrays = p.arrays()
    arrays[-2] = np.zeros_like(arrays[-2])
    arrays[-1] = np.zeros(4)
    np.testing.assert_allclose(classify(with_arrays(p, arrays), fixture_graph()), np.full(4, 0.25), atol=1e-15)
    arrays[-1] = np.array([10.0, 0.0, 0.0, 0.0])
    assert classify(with_arrays(p, arrays), fixture_graph())[0] > 0.999
    z = encode_graph(p, fixture_graph())
    np.testing.assert_allclose(classify(p, fixture_graph()), softmax(z @ p.head_weight + p.head_bias), atol=1e-10)


def test_batched_equals_one_by_one():
    rng = np.random.default_rng(0)
    graphs = [random_graph(rng, int(rng.integers(1, 9)), 3, 0, i) for i in range(20)]
    p = init_params(EncoderConfig(hidden_dim=6, output_dim=3, seed=2), 3)
    many = encode_graphs(p, graphs)
    one = np.stack([encode_graph(p, g) for g in graphs])
    np.testing.assert_allclose(many, one, atol=1e-12)


def test_dropout_forward_is_seeded():
    p = init_params(EncoderConfig(hidden_dim=8, dropout_p=0.5), 3)
    g = fixture_graph()
    a = encode_graph(p, g, dropout_active=True, rng=4)
    assert np.array_equal(a, encode_graph(p, g, dropout_active=True, rng=4))
    assert not np.array_equal(a, encode_graph(p, g))


def test_feature_width_mismatch_rejected():
    p = init_params(EncoderConfig(), 2)
    with pytest.raises(ContractError):
        encode_graph(p, fixture_graph())


# --------------------------------------------------------------------------- gradients


def gradient_relative_error(seed: int, propagation: str = "gcn") -> float:
    rng = np.random.default_rng(seed)
    f = int(rng.integers(1, 4))
    k = int(rng.integers(2, 4))
    cfg = EncoderConfig(num_layers=int(rng.integers(1, 3)), hidden_dim=int(rng.integers(2, 5)), output_dim=k,
                        seed=seed, propagation=propagation)
    graphs = [random_graph(rng, int(rng.integers(1, 6)), f, int(rng.integers(0, k)), i) for i in range(3)]
    p = init_params(cfg, f)
    _, grads = loss_and_gradients(p, graphs)
    fd = finite_difference(lambda arrs: dense_loss(arrs, cfg.num_layers, graphs, propagation), p.arrays(), 1e-5)
    a, b = np.concatenate([g.ravel() for g in grads]), np.concatenate([g.ravel() for g in fd])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("propagation", ["gcn", "sum"])
def test_gradients_match_finite_differences(seed, propagation):
    assert gradient_relative_error(seed, propagation) < 1e-4


def test_loss_matches_oracle():
    cfg = EncoderConfig(num_layers=2, hidden_dim=3, output_dim=2, seed=1)
    p = init_params(cfg, 3)
    g = fixture_graph()
    loss, _ = loss_and_gradients(p, [g])
    assert loss == pytest.approx(dense_loss(p.arrays(), 2, [g]), abs=1e-12)


# --------------------------------------------------------------------------- training


def star(k, label, gid):
    return Graph(np.ones((k + 1, 1)), [(0, i) for i in range(1, k + 1)], label, gid)


def separable_toy():
    # complete graphs propagate the constant feature to exactly 1 at every node; stars do not
    graphs = [complete_graph(n, 0, i) for i, n in enumerate([3, 4, 5, 6, 7] * 4)]
    graphs += [star(k, 1, 100 + i) for i, k in enumerate([3, 4, 5, 6, 7] * 4)]
    return graphs


def test_train_classifier_separates_toy():
    graphs = separable_toy()
    train, val = graphs[::2], graphs[1::2]
    cfg = EncoderConfig(num_layers=2, hidden_dim=16, dropout_p=0.0, learning_rate=1e-2, max_epochs=200,
                        patience=200, batch_size=8)
    p = train_classifier(train, val, cfg)
    pred = classify_graphs(p, val).argmax(axis=1)
    assert np.mean(pred == [g.label for g in val]) == 1.0
    assert p.history[-1]["epoch"] <= 200


def test_zero_epochs_returns_initialisation():
    cfg = EncoderConfig(max_epochs=0, output_dim=2, hidden_dim=4)
    graphs = separable_toy()
    p = train_classifier(graphs, graphs, cfg)
    assert p.equals(init_params(cfg, 1))
    assert [h["epoch"] for h in p.history] == [0]


def test_training_is_deterministic(tmp_path):
    cfg = EncoderConfig(max_epochs=5, hidden_dim=8, output_dim=2, seed=9, batch_size=4)
    graphs = separable_toy()
    a = train_classifier(graphs[::2], graphs[1::2], cfg)
    b = train_classifier(graphs[::2], graphs[1::2], cfg)
    assert a.equals(b) and json.dumps(a.history) == json.dumps(b.history)
    a.save(tmp_path / "p.json")
    c = EncoderParams.load(tmp_path / "p.json")
    assert c.equals(a)
    assert a.history_csv().splitlines()[0].startswith("epoch")


def test_non_finite_loss_raises_with_diagnostics():
    graphs = [Graph(np.full((3, 1), 1e308), [(0, 1), (1, 2)], i % 2, i) for i in range(4)]
    with pytest.raises(TrainingError) as info:
        train_classifier(graphs, graphs, EncoderConfig(max_epochs=3, hidden_dim=4, propagation="sum"))
    assert info.value.diagnostics
