import os
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import complete_graph, path_graph, toy_dataset
from graphood.data import (
    Graph,
    GraphDataset,
    count_triangles,
    datasets_equal,
    generate_triangles_dataset,
    make_loco_split,
    make_stratified_split,
    parse_tu_dataset,
    write_tu_dataset,
)
from graphood.errors import ContractError, GenerationError, IntegrityError, ParseError, ProtocolError
from oracles import brute_triangles

# --------------------------------------------------------------------------- TU parsing


def test_fixture_parses_exactly(fixture_root):
    d = parse_tu_dataset(fixture_root, "FIXTURE")
    assert len(d) == 4 and d.num_classes == 2
    assert d.labels.tolist() == [0, 0, 1, 1]
    assert d.label_mapping == {1: 0, 2: 1}
    # hand-listed adjacency, 0-based within each graph
    assert d[0].edges.tolist() == [[0, 1], [0, 2], [1, 2]]
    assert d[1].edges.tolist() == [[0, 1]]
    assert d[2].edges.tolist() == [[0, 1], [0, 3], [1, 2], [2, 3]]
    assert d[3].edges.shape == (0, 2) and d[3].num_nodes == 1
    # node labels 0/1/2 one-hot encoded
    assert d.num_features == 3
    np.testing.assert_array_equal(d[0].node_features, np.eye(3))
    np.testing.assert_array_equal(d[3].node_features, [[1.0, 0.0, 0.0]])


@pytest.mark.parametrize("missing", ["A", "graph_indicator", "graph_labels"])
def test_missing_mandatory_file_is_named(fixture_root, tmp_path, missing):
    shutil.copytree(fixture_root, tmp_path / "F")
    (tmp_path / "F" / f"FIXTURE_{missing}.txt").unlink()
    with pytest.raises(ParseError, match=f"FIXTURE_{missing}.txt"):
        parse_tu_dataset(tmp_path / "F", "FIXTURE")


def test_dangling_node_reports_line(fixture_root, tmp_path):
    shutil.copytree(fixture_root, tmp_path / "F")
    with open(tmp_path / "F" / "FIXTURE_A.txt", "a") as fh:
        fh.write("11, 10\n")
    with pytest.raises(IntegrityError, match=r"FIXTURE_A.txt:17"):
        parse_tu_dataset(tmp_path / "F", "FIXTURE")


def test_edge_across_graphs_rejected(fixture_root, tmp_path):
    shutil.copytree(fixture_root, tmp_path / "F")
    with open(tmp_path / "F" / "FIXTURE_A.txt", "a") as fh:
        fh.write("1, 4\n")
    with pytest.raises(IntegrityError, match=r":17"):
        parse_tu_dataset(tmp_path / "F", "FIXTURE")


def test_dangling_graph_index(fixture_root, tmp_path):
    shutil.copytree(fixture_root, tmp_path / "F")
    p = tmp_path / "F" / "FIXTURE_graph_indicator.txt"
    p.write_text(p.read_text().replace("4\n", "5\n"))
    with pytest.raises(IntegrityError, match=r"graph_indicator.txt:10"):
        parse_tu_dataset(tmp_path / "F", "FIXTURE")


def test_labels_compacted_and_constant_features(fixture_root, tmp_path):
    shutil.copytree(fixture_root, tmp_path / "F")
    (tmp_path / "F" / "FIXTURE_graph_labels.txt").write_text("-1\n7\n7\n3\n")
    (tmp_path / "F" / "FIXTURE_node_labels.txt").unlink()
    d = parse_tu_dataset(tmp_path / "F", "FIXTURE")
    assert d.label_mapping == {-1: 0, 3: 1, 7: 2}
    assert d.labels.tolist() == [0, 2, 2, 1]
    assert d.num_features == 1
    assert all(np.all(g.node_features == 1.0) for g in d.graphs)


def test_attributes_concatenate_with_labels(fixture_root, tmp_path):
    shutil.copytree(fixture_root, tmp_path / "F")
    (tmp_path / "F" / "FIXTURE_node_attributes.txt").write_text("".join(f"{i}.5, {-i}\n" for i in range(10)))
    assert parse_tu_dataset(tmp_path / "F", "FIXTURE").num_features == 5
    assert parse_tu_dataset(tmp_path / "F", "FIXTURE", "labels").num_features == 3
    d = parse_tu_dataset(tmp_path / "F", "FIXTURE", "attributes")
    np.testing.assert_array_equal(d[1].node_features, [[3.5, -3.0], [4.5, -4.0]])


def test_tu_write_parse_roundtrip(tmp_path, small_triangles):
    write_tu_dataset(small_triangles, tmp_path, "TRIANGLES")
    back = parse_tu_dataset(tmp_path, "TRIANGLES")
    assert datasets_equal(back, small_triangles)
    assert back.class_names == tuple(str(k) for k in range(1, 11))


TU_ROOT = os.environ.get("GRAPHOOD_TU_ROOT")


@pytest.mark.skipif(not TU_ROOT or not (Path(TU_ROOT or ".") / "ENZYMES").is_dir(), reason="ENZYMES not available")
def test_enzymes_table_statistics():
    d = parse_tu_dataset(Path(TU_ROOT) / "ENZYMES", "ENZYMES", feature_mode="labels")
    s = d.stats()
    assert (s["graphs"], s["classes"], s["features"]) == (600, 6, 3)
    assert s["mean_nodes"] == pytest.approx(32.63, abs=0.01)
    assert d.class_names[0] == "Oxidoreductases"


@pytest.mark.skipif(not TU_ROOT or not (Path(TU_ROOT or ".") / "IMDB-MULTI").is_dir(), reason="IMDB-MULTI not available")
def test_imdb_multi_table_statistics():
    d = parse_tu_dataset(Path(TU_ROOT) / "IMDB-MULTI", "IMDB-MULTI")
    s = d.stats()
    assert (s["graphs"], s["classes"], s["features"]) == (1500, 3, 1)
    assert d.class_names == ("Comedy", "Romance", "Sci-Fi")


# --------------------------------------------------------------------------- graphs and JSON


def test_graph_normalises_edges():
    g = Graph(np.ones((3, 1)), [(2, 0), (0, 2), (1, 0)], 0, 0)
    assert g.edges.tolist() == [[0, 1], [0, 2]]
    with pytest.raises(ContractError):
        Graph(np.ones((2, 1)), [(0, 0)], 0, 0)
    with pytest.raises(ContractError):
        Graph(np.ones((2, 1)), [(0, 2)], 0, 0)
    with pytest.raises(ContractError):
        Graph(np.ones((0, 1)), [], 0, 0)


def test_dataset_requires_every_class():
    with pytest.raises(ContractError):
        GraphDataset("x", (path_graph(3, 0, 0),), 2, ("a", "b"), 1)


@st.composite
def datasets(draw):
    num_classes = draw(st.integers(1, 4))
    f = draw(st.integers(1, 3))
    graphs = []
    for c in range(num_classes):
        for _ in range(draw(st.integers(1, 3))):
            n = draw(st.integers(1, 7))
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
            edges = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
            x = draw(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=n * f, max_size=n * f))
            graphs.append(Graph(np.array(x).reshape(n, f), np.array(edges, dtype=int).reshape(-1, 2), c, len(graphs)))
    return GraphDataset("h", tuple(graphs), num_classes, tuple(f"k{c}" for c in range(num_classes)), f)


@given(datasets())
def test_json_roundtrip(d):
    back = GraphDataset.from_json(d.to_json())
    assert datasets_equal(d, back)
    assert back.to_json() == d.to_json()
    assert d.class_counts().sum() == len(d)


# --------------------------------------------------------------------------- triangles


def test_count_triangles_examples():
    assert count_triangles(complete_graph(3)) == 1
    assert count_triangles(path_graph(3)) == 0
    assert count_triangles(complete_graph(4)) == 4


@given(st.integers(1, 9), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_count_triangles_matches_enumeration(n, p, seed):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    g = Graph(np.ones((n, 1)), np.stack([iu[keep], ju[keep]], 1), 0, 0)
    assert count_triangles(g) == brute_triangles(g)


def test_generator_labels_verified_by_oracle():
    d = generate_triangles_dataset(30, (10, 30), seed=0)
    assert len(d) == 300 and d.num_classes == 10
    assert d.class_counts().tolist() == [30] * 10
    assert all(brute_triangles(g) == g.label + 1 for g in d.graphs)
    assert all(10 <= g.num_nodes <= 30 and np.all(g.node_features == 1.0) for g in d.graphs)


def test_generator_is_deterministic():
    a = generate_triangles_dataset(5, (10, 20), seed=11)
    b = generate_triangles_dataset(5, (10, 20), seed=11)
    assert a.to_json() == b.to_json()
    assert a.to_json() != generate_triangles_dataset(5, (10, 20), seed=12).to_json()


def test_k4_is_member_of_four_triangle_class():
    k4 = complete_graph(4, label=3)
    assert count_triangles(k4) == k4.label + 1


def test_generator_reports_infeasible_class():
    # on four nodes only 0, 1, 2 or 4 triangles are possible
    with pytest.raises(GenerationError, match=r"class 2 \(3 triangles\)"):
        generate_triangles_dataset(1, (4, 4), seed=0, max_attempts=2000)


@pytest.mark.parametrize("bad", [(3, 10), (10, 65), (12, 10)])
def test_generator_node_range_checked(bad):
    with pytest.raises(ContractError):
        generate_triangles_dataset(1, bad)


# --------------------------------------------------------------------------- splits


def test_loco_split_examples():
    d = toy_dataset(per_class=10, num_classes=6)
    s = make_loco_split(d, 2, 0.2, seed=0)
    assert s.relabeling == {0: 0, 1: 1, 3: 2, 4: 3, 5: 4}
    assert sorted(s.ood_ids) == [g.graph_id for g in d.graphs if g.label == 2]
    val_labels = [d[i].label for i in s.val_ids]
    assert all(val_labels.count(c) == 2 for c in (0, 1, 3, 4, 5))
    assert sorted(g.label for g in s.graphs(d, "train")) == sorted([k for k in range(5)] * 8)
    s1 = make_loco_split(d, 2, 0.2, seed=1)
    assert s1.val_ids != s.val_ids and s1.ood_ids == s.ood_ids
    assert make_loco_split(d, 2, 0.2, seed=0) == s


def test_loco_split_errors():
    with pytest.raises(ProtocolError):
        make_loco_split(toy_dataset(5, 2), 0)
    d = GraphDataset("s", (path_graph(2, 0, 0), path_graph(2, 1, 1), path_graph(2, 1, 2), path_graph(2, 2, 3)),
                     3, ("a", "b", "c"), 1)
    with pytest.raises(ProtocolError):
        make_loco_split(d, 1)
    with pytest.raises(ContractError):
        make_loco_split(toy_dataset(5, 3), 3)
    with pytest.raises(ContractError):
        make_loco_split(toy_dataset(5, 3), 0, val_fraction=1.0)


@given(st.lists(st.integers(2, 12), min_size=3, max_size=6), st.floats(0.05, 0.95), st.integers(0, 1000), st.data())
def test_loco_split_properties(sizes, frac, seed, data):
    graphs = []
    for c, n in enumerate(sizes):
        base = len(graphs)
        graphs.extend(path_graph(2, c, base + i) for i in range(n))
    d = GraphDataset("p", tuple(graphs), len(sizes), tuple(map(str, range(len(sizes)))), 1)
    ood = data.draw(st.integers(0, len(sizes) - 1))
    s = make_loco_split(d, ood, frac, seed)
    tr, va, oo = set(s.train_ids), set(s.val_ids), set(s.ood_ids)
    assert not (tr & va or tr & oo or va & oo)
    assert len(tr) + len(va) + len(oo) == len(d)
    assert oo == {g.graph_id for g in d.graphs if g.label == ood}
    assert sorted(s.relabeling.values()) == list(range(len(sizes) - 1))
    for c, n in enumerate(sizes):
        if c == ood:
            continue
        n_val = sum(d[i].label == c for i in va)
        assert 1 <= n_val <= n - 1
        assert abs(n_val - frac * n) <= 1  # stratified within one graph


def test_stratified_split_covers_all_classes():
    d = toy_dataset(10, 4)
    train, val = make_stratified_split(d, 0.3, seed=5)
    assert sorted(train + val) == sorted(g.graph_id for g in d.graphs)
    assert np.bincount([d[i].label for i in val]).tolist() == [3] * 4
