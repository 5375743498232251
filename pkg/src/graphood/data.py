"""Graph classification datasets: TU-format parsing, TRIANGLES generation, LOCO splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, GenerationError, IntegrityError, ParseError, ProtocolError

# Class names for the bundled benchmark datasets, in label order.
KNOWN_CLASS_NAMES = {
    "ENZYMES": ["Oxidoreductases", "Transferases", "Hydrolases", "Lyases", "Isomerases", "Ligases"],
    "IMDB-MULTI": ["Comedy", "Romance", "Sci-Fi"],
    "REDDIT-MULTI-5K": ["WorldNews", "Videos", "AdviceAnimals", "Aww", "MildlyInteresting"],
    "REDDIT-MULTI-12K": [
        "AskReddit", "AdviceAnimals", "Atheism", "Aww", "IAmA", "MildlyInteresting",
        "ShowerThoughts", "Videos", "TodayILearned", "WorldNews", "TrollXChromosomes",
    ],
    "TRIANGLES": [str(k) for k in range(1, 11)],
}

MAX_GENERATION_ATTEMPTS = 10_000


@dataclass(frozen=True, eq=False)
class Graph:
    """An undirected attributed graph.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    """

    node_features: np.ndarray
    edges: np.ndarray
    label: int
    graph_id: int

    def __post_init__(self):
        x = np.asarray(self.node_features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ContractError(f"graph {self.graph_id}: node_features must be a non-empty matrix, got shape {x.shape}")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size:
            if e.min() < 0 or e.max() >= x.shape[0]:
                raise ContractError(f"graph {self.graph_id}: edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise ContractError(f"graph {self.graph_id}: self-loop in stored edges")
            e = np.sort(e, axis=1)
            e = np.unique(e, axis=0)
        x.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "graph_id", int(self.graph_id))

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_features(self) -> int:
        return self.node_features.shape[1]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def same_as(self, other: Graph) -> bool:
        return (
            self.graph_id == other.graph_id
            and self.label == other.label
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.node_features, other.node_features)
        )


@dataclass(frozen=True, eq=False)
class GraphDataset:
    name: str
    graphs: tuple[Graph, ...]
    num_classes: int
    class_names: tuple[str, ...]
    num_features: int
    # original on-disk label -> compact class index
    label_mapping: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        if len(self.class_names) != self.num_classes:
            raise ContractError(f"{self.name}: {len(self.class_names)} class names for {self.num_classes} classes")
        counts = np.zeros(self.num_classes, dtype=int)
        for g in self.graphs:
            if not 0 <= g.label < self.num_classes:
                raise ContractError(f"{self.name}: graph {g.graph_id} has label {g.label} outside [0, {self.num_classes})")
            if g.num_features != self.num_features:
                raise ContractError(f"{self.name}: graph {g.graph_id} has {g.num_features} features, expected {self.num_features}")
            counts[g.label] += 1
        if np.any(counts == 0):
            raise ContractError(f"{self.name}: classes without graphs: {np.flatnonzero(counts == 0).tolist()}")
        ids = [g.graph_id for g in self.graphs]
        if len(set(ids)) != len(ids):
            raise ContractError(f"{self.name}: duplicate graph ids")
        object.__setattr__(self, "_by_id", {g.graph_id: g for g in self.graphs})

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, graph_id: int) -> Graph:
        return self._by_id[graph_id]

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=int)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def stats(self) -> dict:
        return {
            "graphs": len(self.graphs),
            "classes": self.num_classes,
            "mean_nodes": float(np.mean([g.num_nodes for g in self.graphs])),
            "mean_edges": float(np.mean([g.num_edges for g in self.graphs])),
            "features": self.num_features,
        }

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "num_features": self.num_features,
            "label_mapping": {str(k): v for k, v in sorted(self.label_mapping.items())},
            "graphs": [
                {
                    "id": g.graph_id,
                    "nodes": g.num_nodes,
                    "edges": g.edges.tolist(),
                    "features": g.node_features.tolist(),
                    "label": g.label,
                }
                for g in self.graphs
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> GraphDataset:
        graphs = []
        for i, rec in enumerate(doc["graphs"]):
            feats = np.asarray(rec["features"], dtype=np.float64).reshape(rec["nodes"], -1)
            graphs.append(Graph(feats, np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2), rec["label"], rec.get("id", i)))
        return cls(
            name=doc["name"],
            graphs=tuple(graphs),
            num_classes=int(doc["num_classes"]),
            class_names=tuple(doc["class_names"]),
            num_features=int(doc.get("num_features", graphs[0].num_features)),
            label_mapping={int(k): int(v) for k, v in doc.get("label_mapping", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> GraphDataset:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> GraphDataset:
        return cls.from_json(Path(path).read_text())


def datasets_equal(a: GraphDataset, b: GraphDataset) -> bool:
    return (
        a.name == b.name
        and a.num_classes == b.num_classes
        and a.class_names == b.class_names
        and a.num_features == b.num_features
        and a.label_mapping == b.label_mapping
        and len(a) == len(b)
        and all(x.same_as(y) for x, y in zip(a.graphs, b.graphs))
    )


# --------------------------------------------------------------------------- TU format


def _read_rows(path: Path, dtype=float) -> list[list]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([dtype(tok) for tok in line.replace(",", " ").split()])
            except ValueError as exc:
                raise ParseError(f"{path.name}:{lineno}: cannot parse {line!r}") from exc
    return rows


def _read_ints(path: Path) -> list[int]:
    out = []
    for lineno, row in enumerate(_read_rows(path, dtype=float), start=1):
        if len(row) != 1 or row[0] != int(row[0]):
            raise ParseError(f"{path.name}:{lineno}: expected a single integer")
        out.append(int(row[0]))
    return out


def parse_tu_dataset(root, name: str, feature_mode: str = "auto", class_names: Sequence[str] | None = None) -> GraphDataset:
    """Load a dataset stored in the TU benchmark text format.

    ``feature_mode`` chooses node features: ``"auto"`` concatenates the one-hot
    node labels and the node attributes (whichever exist), ``"labels"`` and
    ``"attributes"`` restrict to one source. Nodes with neither source get the
    constant feature 1.
    """
    if feature_mode not in ("auto", "labels", "attributes"):
        raise ContractError(f"unknown feature_mode {feature_mode!r}")
    root = Path(root)
    files = {key: root / f"{name}_{key}.txt" for key in ("A", "graph_indicator", "graph_labels", "node_labels", "node_attributes")}
    for key in ("A", "graph_indicator", "graph_labels"):
        if not files[key].is_file():
            raise ParseError(f"missing mandatory file {files[key].name} in {root}")

    indicator = _read_ints(files["graph_indicator"])
    raw_labels = _read_ints(files["graph_labels"])
    num_graphs = len(raw_labels)
    num_nodes = len(indicator)
    for lineno, gid in enumerate(indicator, start=1):
        if not 1 <= gid <= num_graphs:
            raise IntegrityError(f"{files['graph_indicator'].name}:{lineno}: graph index {gid} outside [1, {num_graphs}]")
    node_graph = np.asarray(indicator, dtype=np.int64) - 1
    if np.any(np.diff(node_graph) < 0):
        raise IntegrityError(f"{files['graph_indicator'].name}: nodes are not grouped by graph")
    sizes = np.bincount(node_graph, minlength=num_graphs)
    if np.any(sizes == 0):
        bad = int(np.flatnonzero(sizes == 0)[0]) + 1
        raise IntegrityError(f"{files['graph_labels'].name}:{bad}: graph {bad} has no nodes")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    edges_per_graph: list[list[tuple[int, int]]] = [[] for _ in range(num_graphs)]
    for lineno, row in enumerate(_read_rows(files["A"], dtype=float), start=1):
        if len(row) != 2:
            raise ParseError(f"{files['A'].name}:{lineno}: expected 'i, j'")
        i, j = int(row[0]) - 1, int(row[1]) - 1
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise IntegrityError(f"{files['A'].name}:{lineno}: node index outside [1, {num_nodes}]")
        gi, gj = node_graph[i], node_graph[j]
        if gi != gj:
            raise IntegrityError(f"{files['A'].name}:{lineno}: edge joins graphs {gi + 1} and {gj + 1}")
        if i != j:
            a, b = sorted((i - offsets[gi], j - offsets[gi]))
            edges_per_graph[gi].append((a, b))

    blocks = []
    if feature_mode in ("auto", "labels") and files["node_labels"].is_file():
        node_labels = np.asarray(_read_ints(files["node_labels"]))
        if len(node_labels) != num_nodes:
            raise IntegrityError(f"{files['node_labels'].name}: {len(node_labels)} lines for {num_nodes} nodes")
        values, codes = np.unique(node_labels, return_inverse=True)
        blocks.append(np.eye(len(values))[codes])
    if feature_mode in ("auto", "attributes") and files["node_attributes"].is_file():
        rows = _read_rows(files["node_attributes"], dtype=float)
        if len(rows) != num_nodes:
            raise IntegrityError(f"{files['node_attributes'].name}: {len(rows)} lines for {num_nodes} nodes")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ParseError(f"{files['node_attributes'].name}: ragged attribute rows")
        blocks.append(np.asarray(rows, dtype=np.float64))
    features = np.hstack(blocks) if blocks else np.ones((num_nodes, 1))

    distinct = sorted(set(raw_labels))
    mapping = {lab: k for k, lab in enumerate(distinct)}
    if class_names is None:
        known = KNOWN_CLASS_NAMES.get(name)
        class_names = known if known is not None and len(known) == len(distinct) else [str(lab) for lab in distinct]

    graphs = []
    for gi in range(num_graphs):
        lo, hi = offsets[gi], offsets[gi] + sizes[gi]
        e = np.asarray(edges_per_graph[gi], dtype=np.int64).reshape(-1, 2)
        graphs.append(Graph(features[lo:hi], e, mapping[raw_labels[gi]], gi))
    return GraphDataset(name, tuple(graphs), len(distinct), tuple(class_names), features.shape[1], mapping)


def write_tu_dataset(d: GraphDataset, root, name: str | None = None) -> Path:
    """Write ``d`` in TU format (1-based indices, both edge directions, constant features dropped)."""
    name = name or d.name
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    inverse = {v: k for k, v in d.label_mapping.items()} or {k: k + 1 for k in range(d.num_classes)}
    a_lines, ind_lines, lab_lines, attr_lines = [], [], [], []
    offset = 0
    constant = all(np.all(g.node_features == 1.0) for g in d.graphs) and d.num_features == 1
    for gi, g in enumerate(d.graphs, start=1):
        for i, j in g.edges:
            a_lines.append(f"{i + offset + 1}, {j + offset + 1}")
            a_lines.append(f"{j + offset + 1}, {i + offset + 1}")
        ind_lines.extend([str(gi)] * g.num_nodes)
        lab_lines.append(str(inverse[g.label]))
        if not constant:
            attr_lines.extend(", ".join(repr(float(v)) for v in row) for row in g.node_features)
        offset += g.num_nodes
    (root / f"{name}_A.txt").write_text("\n".join(a_lines) + ("\n" if a_lines else ""))
    (root / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (root / f"{name}_graph_labels.txt").write_text("\n".join(lab_lines) + "\n")
    if attr_lines:
        (root / f"{name}_node_attributes.txt").write_text("\n".join(attr_lines) + "\n")
    return root


# --------------------------------------------------------------------------- TRIANGLES


def count_triangles(g: Graph) -> int:
    a = g.adjacency()
    return int(round(np.trace(a @ a @ a) / 6.0))


def _random_graph_edges(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < p
    return np.stack([iu[keep], ju[keep]], axis=1)


def generate_triangles_dataset(num_per_class: int, node_range: tuple[int, int] = (10, 30), seed: int = 0,
                               max_attempts: int = MAX_GENERATION_ATTEMPTS) -> GraphDataset:
    """Generate a 10-class TRIANGLES dataset; class ``k`` holds graphs with exactly ``k + 1`` triangles.

    Each graph is drawn by rejection sampling random graphs whose edge
    probability puts the expected triangle count at the target.
    """
    lo, hi = int(node_range[0]), int(node_range[1])
    if num_per_class < 1:
        raise ContractError("num_per_class must be >= 1")
    if not 4 <= lo <= hi <= 64:
        raise ContractError(f"node_range {node_range} must lie within [4, 64]")
    rng = np.random.default_rng(seed)
    graphs = []
    for k in range(10):
        target = k + 1
        for _ in range(num_per_class):
            for _attempt in range(max_attempts):
                n = int(rng.integers(lo, hi + 1))
                p = min(1.0, (target / math.comb(n, 3)) ** (1.0 / 3.0))
                edges = _random_graph_edges(n, p, rng)
                g = Graph(np.ones((n, 1)), edges, k, len(graphs))
                if count_triangles(g) == target:
                    graphs.append(g)
                    break
            else:
                raise GenerationError(
                    f"class {k} ({target} triangles): no graph found in {max_attempts} attempts with nodes in [{lo}, {hi}]"
                )
    return GraphDataset("TRIANGLES", tuple(graphs), 10, tuple(KNOWN_CLASS_NAMES["TRIANGLES"]), 1,
                        {k + 1: k for k in range(10)})


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class LOCOSplit:
    ood_class: int
    train_ids: tuple[int, ...]
    val_ids: tuple[int, ...]
    ood_ids: tuple[int, ...]
    seed: int
    relabeling: dict[int, int]

    @property
    def num_id_classes(self) -> int:
        return len(self.relabeling)

    def inverse_relabeling(self) -> dict[int, int]:
        return {v: k for k, v in self.relabeling.items()}

    def graphs(self, d: GraphDataset, role: str) -> list[Graph]:
        """Graphs of one role (``train``, ``val`` or ``ood``); ID roles carry compact labels."""
        ids = {"train": self.train_ids, "val": self.val_ids, "ood": self.ood_ids}[role]
        if role == "ood":
            return [d[i] for i in ids]
        return [replace(d[i], label=self.relabeling[d[i].label]) for i in ids]


def _stratified_partition(ids_by_class: dict[int, list[int]], val_fraction: float, rng: np.random.Generator):
    train, val = [], []
    for c in sorted(ids_by_class):
        ids = np.array(sorted(ids_by_class[c]))
        rng.shuffle(ids)
        n_val = min(max(int(round(val_fraction * len(ids))), 1), len(ids) - 1)
        val.extend(ids[:n_val].tolist())
        train.extend(ids[n_val:].tolist())
    return tuple(sorted(train)), tuple(sorted(val))


def _check_fraction(val_fraction: float):
    if not 0.0 < val_fraction < 1.0:
        raise ContractError(f"val_fraction must be in (0, 1), got {val_fraction}")


def make_loco_split(d: GraphDataset, ood_class: int, val_fraction: float = 0.2, seed: int = 0) -> LOCOSplit:
    """Hold out ``ood_class`` and split the remaining classes into stratified train/val parts."""
    if d.num_classes < 3:
        raise ProtocolError(f"{d.name}: need at least 3 classes for leave-one-class-out, got {d.num_classes}")
    if not 0 <= ood_class < d.num_classes:
        raise ContractError(f"ood_class {ood_class} outside [0, {d.num_classes})")
    _check_fraction(val_fraction)
    ids_by_class: dict[int, list[int]] = {}
    for g in d.graphs:
        ids_by_class.setdefault(g.label, []).append(g.graph_id)
    ood_ids = tuple(sorted(ids_by_class.pop(ood_class)))
    small = [c for c, ids in ids_by_class.items() if len(ids) < 2]
    if small:
        raise ProtocolError(f"{d.name}: ID classes {sorted(small)} have fewer than 2 graphs")
    relabeling = {c: k for k, c in enumerate(sorted(ids_by_class))}
    rng = np.random.default_rng([seed, ood_class])
    train, val = _stratified_partition(ids_by_class, val_fraction, rng)
    return LOCOSplit(ood_class, train, val, ood_ids, seed, relabeling)


def make_stratified_split(d: GraphDataset, val_fraction: float = 0.2, seed: int = 0) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Stratified train/val ids over all classes (standard ID classification)."""
    _check_fraction(val_fraction)
    ids_by_class: dict[int, list[int]] = {}
    for g in d.graphs:
        ids_by_class.setdefault(g.label, []).append(g.graph_id)
    return _stratified_partition(ids_by_class, val_fraction, np.random.default_rng([seed, d.num_classes]))
