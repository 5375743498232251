"""Leave-one-class-out evaluation: AUROC, per-split scoring, confusion and distance matrices."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .data import Graph, GraphDataset, LOCOSplit, make_loco_split, make_stratified_split
from .encoder import EncoderConfig, EncoderParams, classify_graphs, encode_graphs, train_classifier
from .errors import ContractError, ExperimentError, GraphOODError
from .methods import (
    METHODS,
    UNCERTAINTY_TYPES,
    Ensemble,
    NatPNConfig,
    decompose_many,
    entropy_rows,
    ensemble_predict_many,
    natpn_posterior_many,
    nuq_fit,
    nuq_scores_many,
    train_natpn,
)

log = logging.getLogger(__name__)

SCORE_COLUMNS = ("graph_id", "split_role", "true_class", "predicted_class", "p_max", "u_data", "u_know", "u_total", "method")


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """P(random OOD score > random ID score), ties counting 1/2, via the rank-sum statistic."""
    neg = np.asarray(id_scores, dtype=np.float64).ravel()
    pos = np.asarray(ood_scores, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise ContractError("AUROC needs non-empty ID and OOD score lists")
    if not (np.all(np.isfinite(neg)) and np.all(np.isfinite(pos))):
        raise ContractError("AUROC scores must be finite")
    ranks = rankdata(np.concatenate([pos, neg]))  # average ranks for ties
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass(frozen=True)
class ExperimentConfig:
    """Hyperparameters shared by every method in a protocol run."""

    encoder: EncoderConfig = EncoderConfig()
    val_fraction: float = 0.2
    mc_samples: int = 20
    ensemble_size: int = 5
    nuq_bandwidth: str | float = "scott"
    natpn: NatPNConfig = NatPNConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        doc = dict(doc)
        if "encoder" in doc:
            doc["encoder"] = EncoderConfig(**doc["encoder"])
        if "natpn" in doc:
            doc["natpn"] = NatPNConfig(**doc["natpn"])
        return cls(**doc)


def model_seed(cfg: ExperimentConfig, split_seed: int, member: int = 0) -> int:
    return cfg.encoder.seed + 7919 * split_seed + member


class ModelCache:
    """In-process memo of trained artifacts, so methods sharing an encoder train it once."""

    def __init__(self):
        self._store: dict = {}

    def get(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]

    def __len__(self):
        return len(self._store)


def _dataset_key(d: GraphDataset) -> tuple:
    return (d.name, len(d), d.num_classes, d.num_features, d.graphs[0].graph_id, d.graphs[-1].graph_id)


def _single_model(d, split_key, train, val, enc_cfg, cache):
    key = ("classifier", _dataset_key(d), split_key, enc_cfg)
    return cache.get(key, lambda: train_classifier(train, val, enc_cfg))


def _natpn_model(d, split_key, train, val, enc_cfg, natpn_cfg, cache):
    key = ("natpn", _dataset_key(d), split_key, enc_cfg, natpn_cfg)
    return cache.get(key, lambda: train_natpn(train, val, enc_cfg, natpn_cfg))


def split_encoder(d: GraphDataset, split: LOCOSplit, cfg: ExperimentConfig,
                  cache: ModelCache | None = None) -> EncoderParams:
    """The single-model encoder of a split (shared by single, mc, nuq and de member 0)."""
    cache = cache if cache is not None else ModelCache()
    train, val = split.graphs(d, "train"), split.graphs(d, "val")
    enc_cfg = cfg.encoder.replace(output_dim=split.num_id_classes, seed=model_seed(cfg, split.seed))
    return _single_model(d, (split.ood_class, split.seed, tuple(split.val_ids)), train, val, enc_cfg, cache)


@dataclass
class SplitScores:
    """Per-graph predictions and uncertainty scores of one method on one split."""

    probs: np.ndarray  # (graphs, ID classes)
    scores: dict[str, np.ndarray]


def score_split(method: str, d: GraphDataset, split: LOCOSplit, cfg: ExperimentConfig,
                cache: ModelCache | None = None) -> tuple[SplitScores, list[Graph], list[Graph]]:
    """Train the method's artifacts on the split's ID train part and score ID val + OOD graphs."""
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    cache = cache if cache is not None else ModelCache()
    train, val, ood = split.graphs(d, "train"), split.graphs(d, "val"), split.graphs(d, "ood")
    evaluated = val + ood
    k = split.num_id_classes
    split_key = (split.ood_class, split.seed, tuple(split.val_ids))

    def enc_cfg(member=0):
        return cfg.encoder.replace(output_dim=k, seed=model_seed(cfg, split.seed, member))

    if method in ("single", "mc", "nuq"):
        base = _single_model(d, split_key, train, val, enc_cfg(), cache)
    if method == "single":
        probs = classify_graphs(base, evaluated)
        return SplitScores(probs, {"total": entropy_rows(probs)}), val, ood
    if method in ("mc", "de"):
        if method == "mc":
            ens = Ensemble((base,), "mc-dropout")
        else:
            members = [_single_model(d, split_key, train, val, enc_cfg(m), cache) for m in range(cfg.ensemble_size)]
            ens = Ensemble(tuple(members), "deep-ensemble")
        member_probs = ensemble_predict_many(ens, evaluated, cfg.mc_samples, seed=split.seed)
        u_data, u_know, u_total = decompose_many(member_probs)
        return SplitScores(member_probs.mean(axis=0), {"data": u_data, "know": u_know, "total": u_total}), val, ood
    if method == "nuq":
        support = encode_graphs(base, train)
        model = nuq_fit(support, [g.label for g in train], cfg.nuq_bandwidth, num_classes=k)
        s = nuq_scores_many(model, encode_graphs(base, evaluated))
        return SplitScores(s.eta, {"data": s.u_data, "know": s.u_know}), val, ood
    params, flow = _natpn_model(d, split_key, train, val, enc_cfg(), cfg.natpn, cache)
    preds = natpn_posterior_many(params, flow, evaluated)
    probs = np.stack([p.mean for p in preds])
    u_know = -np.array([p.log_density for p in preds])
    return SplitScores(probs, {"data": entropy_rows(probs), "know": u_know}), val, ood


@dataclass
class ExperimentResult:
    dataset: str
    method: str
    ood_class: int
    num_classes: int
    seeds: list[int] = field(default_factory=list)
    auroc: dict[str, list[float]] = field(default_factory=dict)
    val_accuracy: list[float] = field(default_factory=list)
    # per split: fraction of OOD graphs predicted as each original class
    ood_predictions: list[list[float]] = field(default_factory=list)
    failed_splits: list[dict] = field(default_factory=list)
    score_rows: list[list[dict]] = field(default_factory=list, repr=False)

    @property
    def n_splits(self) -> int:
        return len(self.seeds)

    @property
    def auroc_mean(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.auroc.items() if v}

    @property
    def auroc_std(self) -> dict[str, float]:
        return {k: float(np.std(v)) for k, v in self.auroc.items() if v}

    @property
    def ood_prediction_freq(self) -> np.ndarray:
        if not self.ood_predictions:
            return np.zeros(self.num_classes)
        return np.mean(np.asarray(self.ood_predictions), axis=0)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "method": self.method,
            "ood_class": self.ood_class,
            "num_classes": self.num_classes,
            "seeds": list(self.seeds),
            "auroc": {k: list(v) for k, v in self.auroc.items()},
            "auroc_mean": self.auroc_mean,
            "auroc_std": self.auroc_std,
            "val_accuracy": list(self.val_accuracy),
            "ood_predictions": [list(r) for r in self.ood_predictions],
            "failed_splits": list(self.failed_splits),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentResult:
        return cls(doc["dataset"], doc["method"], int(doc["ood_class"]), int(doc["num_classes"]),
                   list(doc["seeds"]), {k: list(v) for k, v in doc["auroc"].items()}, list(doc["val_accuracy"]),
                   [list(r) for r in doc.get("ood_predictions", [])], list(doc.get("failed_splits", [])))


def _score_rows(method, split, sc: SplitScores, val, ood) -> list[dict]:
    inverse = split.inverse_relabeling()
    rows = []
    pred = np.argmax(sc.probs, axis=1)  # first maximum wins ties
    for i, (g, role) in enumerate([(g, "val") for g in val] + [(g, "ood") for g in ood]):
        true_class = inverse[g.label] if role == "val" else g.label
        rows.append({
            "graph_id": g.graph_id,
            "split_role": role,
            "true_class": true_class,
            "predicted_class": inverse[int(pred[i])],
            "p_max": float(sc.probs[i, pred[i]]),
            "u_data": float(sc.scores["data"][i]) if "data" in sc.scores else None,
            "u_know": float(sc.scores["know"][i]) if "know" in sc.scores else None,
            "u_total": float(sc.scores["total"][i]) if "total" in sc.scores else None,
            "method": method,
        })
    return rows


def run_loco_experiment(d: GraphDataset, method: str, ood_class: int, n_splits: int = 5, base_seed: int = 0,
                        cfg: ExperimentConfig = ExperimentConfig(), cache: ModelCache | None = None,
                        keep_scores: bool = False) -> ExperimentResult:
    """Hold out ``ood_class``; for each split seed train on ID train and AUROC-rank ID val vs OOD."""
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    if n_splits < 1:
        raise ContractError("n_splits must be >= 1")
    cache = cache if cache is not None else ModelCache()
    result = ExperimentResult(d.name, method, ood_class, d.num_classes,
                              auroc={t: [] for t in UNCERTAINTY_TYPES[method]})
    for s in range(n_splits):
        seed = base_seed + s
        try:
            split = make_loco_split(d, ood_class, cfg.val_fraction, seed)
            sc, val, ood = score_split(method, d, split, cfg, cache)
        except GraphOODError as exc:
            result.failed_splits.append({"split": s, "seed": seed, "error": str(exc)})
            raise ExperimentError(f"{d.name}/{method}/ood={ood_class}: split {s} (seed {seed}) failed: {exc}",
                                  partial=result) from exc
        n_val = len(val)
        inverse = split.inverse_relabeling()
        pred = np.argmax(sc.probs, axis=1)
        result.seeds.append(seed)
        result.val_accuracy.append(float(np.mean(pred[:n_val] == np.array([g.label for g in val]))))
        for t in UNCERTAINTY_TYPES[method]:
            result.auroc[t].append(auroc(sc.scores[t][:n_val], sc.scores[t][n_val:]))
        original = np.array([inverse[int(c)] for c in pred[n_val:]])
        result.ood_predictions.append((np.bincount(original, minlength=d.num_classes) / len(ood)).tolist())
        if keep_scores:
            result.score_rows.append(_score_rows(method, split, sc, val, ood))
        log.info("%s/%s ood=%d split=%d auroc=%s", d.name, method, ood_class, s,
                 {t: round(v[-1], 4) for t, v in result.auroc.items()})
    return result


# --------------------------------------------------------------------------- matrices


@dataclass
class OODConfusionMatrix:
    """Rows: held-out class; columns: predicted original class. Diagonal is masked (zero)."""

    matrix: np.ndarray
    class_names: tuple[str, ...]

    @property
    def mask(self) -> np.ndarray:
        return ~np.eye(len(self.class_names), dtype=bool)


@dataclass
class ClassDistanceMatrix:
    matrix: np.ndarray
    class_names: tuple[str, ...]


def confusion_from_results(results: Sequence[ExperimentResult], d: GraphDataset) -> OODConfusionMatrix:
    m = np.zeros((d.num_classes, d.num_classes))
    seen = set()
    for r in results:
        row = r.ood_prediction_freq
        row[r.ood_class] = 0.0
        m[r.ood_class] = row
        seen.add(r.ood_class)
    missing = sorted(set(range(d.num_classes)) - seen)
    if missing:
        raise ContractError(f"no results for OOD classes {missing}")
    return OODConfusionMatrix(m, d.class_names)


def ood_confusion_matrix(d: GraphDataset, method: str, cfg: ExperimentConfig = ExperimentConfig(),
                         base_seed: int = 0, n_splits: int = 5, cache: ModelCache | None = None) -> OODConfusionMatrix:
    cache = cache if cache is not None else ModelCache()
    results = [run_loco_experiment(d, method, c, n_splits, base_seed, cfg, cache) for c in range(d.num_classes)]
    return confusion_from_results(results, d)


def centroid_distances(embeddings: np.ndarray, labels: Sequence[int], num_classes: int) -> np.ndarray:
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    counts = np.bincount(y, minlength=num_classes)
    if np.any(counts == 0):
        raise ContractError(f"empty classes: {np.flatnonzero(counts == 0).tolist()}")
    centroids = np.stack([z[y == c].mean(axis=0) for c in range(num_classes)])
    dist = cdist(centroids, centroids)
    dist = np.maximum(dist, dist.T)
    np.fill_diagonal(dist, 0.0)
    return dist


def class_distance_matrix(p: EncoderParams, d: GraphDataset) -> ClassDistanceMatrix:
    """Euclidean distances between per-class mean embeddings under encoder ``p``."""
    z = encode_graphs(p, list(d.graphs))
    return ClassDistanceMatrix(centroid_distances(z, d.labels, d.num_classes), d.class_names)


def train_full_encoder(d: GraphDataset, method: str, cfg: ExperimentConfig, seed: int,
                       cache: ModelCache | None = None) -> EncoderParams:
    """Encoder trained on standard ID classification over all classes (natpn uses its own encoder)."""
    cache = cache if cache is not None else ModelCache()
    train_ids, val_ids = make_stratified_split(d, cfg.val_fraction, seed)
    train, val = [d[i] for i in train_ids], [d[i] for i in val_ids]
    enc_cfg = cfg.encoder.replace(output_dim=d.num_classes, seed=model_seed(cfg, seed))
    split_key = ("all", seed, tuple(val_ids))
    if method == "natpn":
        return _natpn_model(d, split_key, train, val, enc_cfg, cfg.natpn, cache)[0]
    return _single_model(d, split_key, train, val, enc_cfg, cache)


def averaged_distance_matrix(d: GraphDataset, method: str, cfg: ExperimentConfig = ExperimentConfig(),
                             base_seed: int = 0, n_splits: int = 5, cache: ModelCache | None = None) -> ClassDistanceMatrix:
    mats = [class_distance_matrix(train_full_encoder(d, method, cfg, base_seed + s, cache), d).matrix
            for s in range(n_splits)]
    return ClassDistanceMatrix(np.mean(mats, axis=0), d.class_names)


def write_matrix_csv(path, matrix: np.ndarray, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(class_names))
        for name, row in zip(class_names, matrix):
            w.writerow([name] + [repr(float(v)) for v in row])


def read_matrix_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]]), names


# --------------------------------------------------------------------------- embeddings


def pca_fit(x: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Mean and top-``k`` principal axes (rows), sign-fixed so each axis' largest entry is positive."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[: min(k, vt.shape[0])]
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    comps = comps * signs[:, None]
    if comps.shape[0] < k:
        comps = np.vstack([comps, np.zeros((k - comps.shape[0], x.shape[1]))])
    return mean, comps


def pca_project(fit_on: np.ndarray, x: np.ndarray, k: int = 2) -> np.ndarray:
    mean, comps = pca_fit(fit_on, k)
    return (np.asarray(x, dtype=np.float64) - mean) @ comps.T


@dataclass
class EmbeddingExport:
    graph_ids: np.ndarray
    roles: list[str]
    classes: np.ndarray
    embeddings: np.ndarray
    pca: np.ndarray

    def write_csv(self, path) -> None:
        h = self.embeddings.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["graph_id", "role", "class"] + [f"z_{i + 1}" for i in range(h)] + ["pca_1", "pca_2"])
            for gid, role, c, z, p in zip(self.graph_ids, self.roles, self.classes, self.embeddings, self.pca):
                w.writerow([int(gid), role, int(c)] + [repr(float(v)) for v in z] + [repr(float(v)) for v in p])


def export_embeddings(p: EncoderParams, split: LOCOSplit, d: GraphDataset, path=None) -> EmbeddingExport:
    """Embeddings of all ID (train + val) and OOD graphs; PCA is fitted on ID rows only."""
    id_ids = sorted(split.train_ids + split.val_ids)
    ids = id_ids + list(split.ood_ids)
    z = encode_graphs(p, [d[i] for i in ids])
    n_id = len(id_ids)
    proj = pca_project(z[:n_id], z)
    out = EmbeddingExport(np.array(ids), ["id"] * n_id + ["ood"] * (len(ids) - n_id),
                          np.array([d[i].label for i in ids]), z, proj)
    if path is not None:
        out.write_csv(Path(path))
    return out


def write_score_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SCORE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in SCORE_COLUMNS})
