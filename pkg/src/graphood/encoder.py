"""Graph convolutional classifier: propagation, mean pooling, linear head, training loop."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import Graph
from .errors import ContractError, TrainingError

DTYPE = torch.float64
EVAL_BATCH = 512
PROPAGATIONS = ("gcn", "sum")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 3
    hidden_dim: int = 64
    dropout_p: float = 0.5
    output_dim: int = 2
    learning_rate: float = 1e-3
    max_epochs: int = 200
    patience: int = 50
    weight_decay: float = 1e-5
    seed: int = 0
    batch_size: int = 32
    # "gcn": D^-1/2 (A+I) D^-1/2;  "sum": A + I (degree-aware, needed for constant node features)
    propagation: str = "gcn"

    def __post_init__(self):
        if self.propagation not in PROPAGATIONS:
            raise ContractError(f"propagation must be one of {PROPAGATIONS}, got {self.propagation!r}")
        if self.num_layers < 1 or self.hidden_dim < 1 or self.output_dim < 1:
            raise ContractError("num_layers, hidden_dim and output_dim must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ContractError("learning_rate must be > 0 and weight_decay >= 0")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise ContractError("max_epochs >= 0, patience >= 1 and batch_size >= 1 required")

    def replace(self, **changes) -> EncoderConfig:
        return EncoderConfig(**{**asdict(self), **changes})


@dataclass(eq=False)
class EncoderParams:
    """Trained (or initial) weights of the graph classifier plus its training history."""

    config: EncoderConfig
    input_dim: int
    conv_weights: list[np.ndarray]
    conv_biases: list[np.ndarray]
    head_weight: np.ndarray  # hidden_dim x output_dim
    head_bias: np.ndarray
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        dims = [self.input_dim] + [self.config.hidden_dim] * self.config.num_layers
        if len(self.conv_weights) != self.config.num_layers or len(self.conv_biases) != self.config.num_layers:
            raise ContractError("number of convolution layers does not match config")
        for k, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            if w.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise ContractError(f"layer {k}: bad weight/bias shapes {w.shape}, {b.shape}")
        if self.head_weight.shape != (self.config.hidden_dim, self.config.output_dim):
            raise ContractError(f"head weight shape {self.head_weight.shape}")
        if self.head_bias.shape != (self.config.output_dim,):
            raise ContractError(f"head bias shape {self.head_bias.shape}")
        for arr in self.arrays():
            if not np.all(np.isfinite(arr)):
                raise ContractError("non-finite parameter entries")
        self._module = None

    def arrays(self) -> list[np.ndarray]:
        return [*self.conv_weights, *self.conv_biases, self.head_weight, self.head_bias]

    def module(self) -> GCNModule:
        if self._module is None:
            self._module = GCNModule.from_params(self)
            self._module.requires_grad_(False)
        return self._module

    def equals(self, other: EncoderParams) -> bool:
        return self.config == other.config and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def to_dict(self) -> dict:
        def enc(a):
            return {"shape": list(a.shape), "data": a.ravel().tolist()}

        return {
            "kind": "gcn-encoder",
            "config": asdict(self.config),
            "seed": self.config.seed,
            "input_dim": self.input_dim,
            "conv_weights": [enc(w) for w in self.conv_weights],
            "conv_biases": [enc(b) for b in self.conv_biases],
            "head_weight": enc(self.head_weight),
            "head_bias": enc(self.head_bias),
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> EncoderParams:
        def dec(rec):
            return np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])

        return cls(
            config=EncoderConfig(**doc["config"]),
            input_dim=int(doc["input_dim"]),
            conv_weights=[dec(r) for r in doc["conv_weights"]],
            conv_biases=[dec(r) for r in doc["conv_biases"]],
            head_weight=dec(doc["head_weight"]),
            head_bias=dec(doc["head_bias"]),
            history=list(doc.get("history", [])),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> EncoderParams:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for row in self.history:
            writer.writerow([row["epoch"], row["train_loss"], row["val_loss"], row["val_acc"]])
        return buf.getvalue()


def init_params(cfg: EncoderConfig, input_dim: int) -> EncoderParams:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn from ``cfg.seed``."""
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    dims = [input_dim] + [cfg.hidden_dim] * cfg.num_layers
    ws, bs = [], []
    for k in range(cfg.num_layers):
        bound = 1.0 / math.sqrt(dims[k])
        ws.append(rng.uniform(-bound, bound, size=(dims[k], dims[k + 1])))
        bs.append(rng.uniform(-bound, bound, size=dims[k + 1]))
    bound = 1.0 / math.sqrt(cfg.hidden_dim)
    hw = rng.uniform(-bound, bound, size=(cfg.hidden_dim, cfg.output_dim))
    hb = rng.uniform(-bound, bound, size=cfg.output_dim)
    return EncoderParams(cfg, input_dim, ws, bs, hw, hb, [])


# --------------------------------------------------------------------------- propagation


def normalize_adjacency(g: Graph) -> np.ndarray:
    """Dense D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = g.adjacency() + np.eye(g.num_nodes)
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


@dataclass(frozen=True)
class _Prepared:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    features: np.ndarray
    label: int


def propagation_matrix(g: Graph, propagation: str = "gcn") -> np.ndarray:
    if propagation == "sum":
        return g.adjacency() + np.eye(g.num_nodes)
    return normalize_adjacency(g)


def _prepare(g: Graph, propagation: str = "gcn") -> _Prepared:
    n = g.num_nodes
    loops = np.arange(n)
    rows = np.concatenate([g.edges[:, 0], g.edges[:, 1], loops])
    cols = np.concatenate([g.edges[:, 1], g.edges[:, 0], loops])
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    if propagation == "sum":
        vals = np.ones(rows.shape[0])
    else:
        deg = np.bincount(rows, minlength=n).astype(np.float64)
        vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    return _Prepared(rows, cols, vals, g.node_features, g.label)


class GraphBatch:
    """Disjoint union of graphs as one block-diagonal sparse propagation matrix."""

    def __init__(self, prepared: Sequence[_Prepared]):
        sizes = np.array([p.features.shape[0] for p in prepared])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        total = int(sizes.sum())
        rows = np.concatenate([p.rows + o for p, o in zip(prepared, offsets)])
        cols = np.concatenate([p.cols + o for p, o in zip(prepared, offsets)])
        vals = np.concatenate([p.vals for p in prepared])
        self.adj = torch.sparse_coo_tensor(
            torch.from_numpy(np.stack([rows, cols])), torch.from_numpy(vals), (total, total),
            is_coalesced=True, check_invariants=False,
        )
        self.x = torch.from_numpy(np.concatenate([p.features for p in prepared])).to(DTYPE)
        self.segment = torch.from_numpy(np.repeat(np.arange(len(prepared)), sizes))
        self.sizes = torch.from_numpy(sizes.astype(np.float64))
        self.y = torch.tensor([p.label for p in prepared], dtype=torch.long)
        self.num_graphs = len(prepared)


class GCNModule(torch.nn.Module):
    def __init__(self, input_dim: int, cfg: EncoderConfig):
        super().__init__()
        dims = [input_dim] + [cfg.hidden_dim] * cfg.num_layers
        self.cfg = cfg
        self.weights = torch.nn.ParameterList(
            [torch.nn.Parameter(torch.zeros(dims[k], dims[k + 1], dtype=DTYPE)) for k in range(cfg.num_layers)]
        )
        self.biases = torch.nn.ParameterList(
            [torch.nn.Parameter(torch.zeros(dims[k + 1], dtype=DTYPE)) for k in range(cfg.num_layers)]
        )
        self.head_weight = torch.nn.Parameter(torch.zeros(cfg.hidden_dim, cfg.output_dim, dtype=DTYPE))
        self.head_bias = torch.nn.Parameter(torch.zeros(cfg.output_dim, dtype=DTYPE))

    @classmethod
    def from_params(cls, p: EncoderParams) -> GCNModule:
        m = cls(p.input_dim, p.config)
        m.load_arrays(p)
        return m

    def load_arrays(self, p: EncoderParams) -> None:
        with torch.no_grad():
            for t, a in zip(self.weights, p.conv_weights):
                t.copy_(torch.from_numpy(a))
            for t, a in zip(self.biases, p.conv_biases):
                t.copy_(torch.from_numpy(a))
            self.head_weight.copy_(torch.from_numpy(p.head_weight))
            self.head_bias.copy_(torch.from_numpy(p.head_bias))

    def to_params(self, input_dim: int, history: list[dict]) -> EncoderParams:
        def arr(t):
            return t.detach().numpy().copy()

        return EncoderParams(
            self.cfg, input_dim,
            [arr(w) for w in self.weights], [arr(b) for b in self.biases],
            arr(self.head_weight), arr(self.head_bias), list(history),
        )

    def embed(self, batch: GraphBatch, generator: torch.Generator | None = None) -> torch.Tensor:
        """Mean-pooled node states; dropout is applied after every layer iff ``generator`` is given."""
        h = batch.x
        p = self.cfg.dropout_p
        for w, b in zip(self.weights, self.biases):
            h = torch.relu(torch.sparse.mm(batch.adj, h @ w) + b)
            if generator is not None and p > 0:
                keep = torch.rand(h.shape, generator=generator, dtype=torch.float32) >= p
                h = h * keep / (1.0 - p)
        pooled = torch.zeros(batch.num_graphs, h.shape[1], dtype=DTYPE).index_add_(0, batch.segment, h)
        return pooled / batch.sizes[:, None]

    def head(self, z: torch.Tensor) -> torch.Tensor:
        return z @ self.head_weight + self.head_bias

    def forward(self, batch: GraphBatch, generator: torch.Generator | None = None) -> torch.Tensor:
        return self.head(self.embed(batch, generator))


def _check_width(p: EncoderParams, graphs: Sequence[Graph]) -> None:
    for g in graphs:
        if g.num_features != p.input_dim:
            raise ContractError(f"graph {g.graph_id} has {g.num_features} features, encoder expects {p.input_dim}")


def _batches(graphs: Sequence[Graph], propagation: str, size: int = EVAL_BATCH):
    prepared = [_prepare(g, propagation) for g in graphs]
    for lo in range(0, len(prepared), size):
        yield GraphBatch(prepared[lo:lo + size])


def encode_graphs(p: EncoderParams, graphs: Sequence[Graph], dropout_active: bool = False,
                  rng: torch.Generator | int | None = None) -> np.ndarray:
    """Embeddings z(x) for many graphs, shape (len(graphs), hidden_dim)."""
    _check_width(p, graphs)
    if not graphs:
        return np.zeros((0, p.config.hidden_dim))
    gen = None
    if dropout_active:
        gen = rng if isinstance(rng, torch.Generator) else torch.Generator().manual_seed(int(rng or 0))
    m = p.module()
    with torch.no_grad():
        out = [m.embed(b, gen) for b in _batches(graphs, p.config.propagation)]
    return torch.cat(out).numpy()


def encode_graph(p: EncoderParams, g: Graph, dropout_active: bool = False,
                 rng: torch.Generator | int | None = None) -> np.ndarray:
    return encode_graphs(p, [g], dropout_active, rng)[0]


def classify_graphs(p: EncoderParams, graphs: Sequence[Graph], dropout_active: bool = False,
                    rng: torch.Generator | int | None = None) -> np.ndarray:
    z = torch.from_numpy(encode_graphs(p, graphs, dropout_active, rng))
    with torch.no_grad():
        return torch.softmax(p.module().head(z), dim=1).numpy()


def classify(p: EncoderParams, g: Graph) -> np.ndarray:
    """Predictive categorical softmax(head(z(g))) without dropout."""
    return classify_graphs(p, [g])[0]


def loss_and_gradients(p: EncoderParams, graphs: Sequence[Graph]) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over ``graphs`` and its gradient, ordered like ``EncoderParams.arrays()``."""
    _check_width(p, graphs)
    m = GCNModule.from_params(p)
    batch = GraphBatch([_prepare(g, p.config.propagation) for g in graphs])
    loss = F.cross_entropy(m(batch), batch.y)
    loss.backward()
    grads = [t.grad.numpy().copy() for t in (*m.weights, *m.biases, m.head_weight, m.head_bias)]
    return float(loss.detach()), grads


# --------------------------------------------------------------------------- training


def train_loop(
    cfg: EncoderConfig,
    parameters: list[torch.nn.Parameter],
    train: Sequence[Graph],
    val: Sequence[Graph],
    batch_loss: Callable[[GraphBatch, torch.Generator], torch.Tensor],
    evaluate: Callable[[list[GraphBatch]], tuple[float, float]],
    modules: list[torch.nn.Module],
) -> list[dict]:
    """Adam with early stopping on validation loss; leaves the best state loaded in ``modules``.

    ``evaluate`` receives pre-built batches and returns ``(mean loss, accuracy)``.
    """
    if not train:
        raise ContractError("training set is empty")
    shuffle_rng = np.random.default_rng([cfg.seed, 0xBA7C])
    dropout_gen = torch.Generator().manual_seed(cfg.seed)
    prepared = [_prepare(g, cfg.propagation) for g in train]
    val_batches = list(_batches(val, cfg.propagation)) if val else []
    train_eval_batches = list(_batches(train, cfg.propagation))

    def monitor():
        for m in modules:
            m.eval()
        with torch.no_grad():
            return evaluate(val_batches) if val_batches else evaluate(train_eval_batches)

    def snapshot():
        return [copy.deepcopy(m.state_dict()) for m in modules]

    optimizer = torch.optim.Adam(parameters, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    val_loss, val_acc = monitor()
    history = [{"epoch": 0, "train_loss": float("nan"), "val_loss": val_loss, "val_acc": val_acc}]
    best_loss, best_state, since_best = val_loss, snapshot(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        for m in modules:
            m.train()
        order = shuffle_rng.permutation(len(prepared))
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = GraphBatch([prepared[i] for i in order[lo:lo + cfg.batch_size]])
            loss = batch_loss(batch, dropout_gen)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}",
                    {"epoch": epoch, "batch": b, "loss": float(loss.detach()), "history": history},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * batch.num_graphs
            count += batch.num_graphs
        val_loss, val_acc = monitor()
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", {"epoch": epoch, "history": history})
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "val_acc": val_acc})
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, snapshot(), 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    for m, state in zip(modules, best_state):
        m.load_state_dict(state)
        m.eval()
    return history


def train_classifier(train: Sequence[Graph], val: Sequence[Graph], cfg: EncoderConfig) -> EncoderParams:
    """Fit the classifier by mean cross-entropy; returns the best-validation-loss parameters."""
    if not train:
        raise ContractError("training set is empty")
    input_dim = train[0].num_features
    init = init_params(cfg, input_dim)
    _check_width(init, list(train) + list(val))
    bad = [g.graph_id for g in list(train) + list(val) if not 0 <= g.label < cfg.output_dim]
    if bad:
        raise ContractError(f"labels outside [0, {cfg.output_dim}) for graphs {bad[:5]}")
    model = GCNModule.from_params(init)

    def batch_loss(batch, gen):
        return F.cross_entropy(model(batch, gen), batch.y)

    def evaluate(batches):
        losses, correct, n = 0.0, 0, 0
        for b in batches:
            logits = model(b)
            losses += float(F.cross_entropy(logits, b.y, reduction="sum"))
            correct += int((logits.argmax(dim=1) == b.y).sum())
            n += b.num_graphs
        return losses / n, correct / n

    history = train_loop(cfg, list(model.parameters()), train, val, batch_loss, evaluate, [model])
    return model.to_params(input_dim, history)
