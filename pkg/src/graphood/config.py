"""JSON suite configuration: schema, validation with field paths, normalisation and hashing.

Schema (all keys except ``datasets`` and ``methods`` optional)::

    {
      "datasets": [
        {"name": "TRIANGLES", "generator": {"per_class": 300, "node_range": [10, 30], "seed": 0}},
        {"name": "ENZYMES", "path": "data/ENZYMES", "feature_mode": "auto"}
      ],
      "methods": [
        {"name": "single"},
        {"name": "de", "ensemble_size": 5, "encoder": {"dropout_p": 0.0}},
        {"name": "mc", "mc_samples": 20},
        {"name": "nuq", "bandwidth": "scott"},
        {"name": "natpn", "latent_dim": 16, "flow_layers": 8}
      ],
      "encoder": {"hidden_dim": 64, "propagation": "gcn", ...},
      "protocol": {"n_splits": 5, "val_fraction": 0.2, "base_seed": 0, "ood_classes": null,
                   "confusion_matrices": true, "distance_matrices": true,
                   "embeddings": true, "keep_scores": true},
      "output_dir": "results",
      "cache": "reuse"
    }

``path`` is either a TU directory (``<path>/<name>_A.txt`` ...) or a JSON dataset file and is
resolved against the config file's directory. A run manifest (which embeds the normalised config
under ``"config"``) is accepted wherever a config is.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import GraphDataset, generate_triangles_dataset, parse_tu_dataset
from .encoder import EncoderConfig
from .errors import ConfigError, GraphOODError
from .methods import METHODS, NatPNConfig
from .protocol import ExperimentConfig

CACHE_POLICIES = ("reuse", "off")
FEATURE_MODES = ("auto", "labels", "attributes")
_NATPN_KEYS = tuple(f.name for f in fields(NatPNConfig))
_ENCODER_KEYS = tuple(f.name for f in fields(EncoderConfig))
# per-method hyperparameters with their defaults; "encoder" overrides are allowed everywhere
METHOD_PARAMS: dict[str, dict[str, Any]] = {
    "single": {},
    "mc": {"mc_samples": 20},
    "de": {"ensemble_size": 5},
    "nuq": {"bandwidth": "scott"},
    "natpn": asdict(NatPNConfig()),
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class TrianglesSpec:
    per_class: int = 300
    node_range: tuple[int, int] = (10, 30)
    seed: int = 0


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    path: str | None = None
    feature_mode: str = "auto"
    generator: TrianglesSpec | None = None

    def to_dict(self) -> dict:
        doc: dict = {"name": self.name}
        if self.generator is not None:
            g = self.generator
            doc["generator"] = {"per_class": g.per_class, "node_range": list(g.node_range), "seed": g.seed}
        else:
            doc["path"] = self.path
            doc["feature_mode"] = self.feature_mode
        return doc

    def load(self, base_dir: Path | None = None) -> GraphDataset:
        if self.generator is not None:
            g = self.generator
            return generate_triangles_dataset(g.per_class, tuple(g.node_range), g.seed)
        p = Path(self.path)
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if p.is_file():
            return GraphDataset.load(p)
        return parse_tu_dataset(p, self.name, self.feature_mode)


@dataclass(frozen=True)
class MethodSpec:
    name: str
    params: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {"name": self.name, **self.params}
        if self.encoder:
            doc["encoder"] = dict(self.encoder)
        return doc

    def experiment_config(self, encoder: EncoderConfig, protocol: ProtocolSpec) -> ExperimentConfig:
        kw: dict = {"encoder": encoder.replace(**self.encoder), "val_fraction": protocol.val_fraction}
        if self.name == "mc":
            kw["mc_samples"] = self.params["mc_samples"]
        elif self.name == "de":
            kw["ensemble_size"] = self.params["ensemble_size"]
        elif self.name == "nuq":
            kw["nuq_bandwidth"] = self.params["bandwidth"]
        elif self.name == "natpn":
            kw["natpn"] = NatPNConfig(**self.params)
        return ExperimentConfig(**kw)


@dataclass(frozen=True)
class ProtocolSpec:
    n_splits: int = 5
    val_fraction: float = 0.2
    base_seed: int = 0
    ood_classes: tuple[int, ...] | None = None  # None: every class
    confusion_matrices: bool = True
    distance_matrices: bool = True
    embeddings: bool = True
    keep_scores: bool = True

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["ood_classes"] = None if self.ood_classes is None else list(self.ood_classes)
        return doc


@dataclass(frozen=True)
class SuiteConfig:
    datasets: tuple[DatasetSpec, ...]
    methods: tuple[MethodSpec, ...]
    encoder: EncoderConfig = EncoderConfig()
    protocol: ProtocolSpec = ProtocolSpec()
    output_dir: str = "results"
    cache: str = "reuse"
    # directory used to resolve relative dataset paths; not part of the serialised config
    base_dir: str | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "datasets": [d.to_dict() for d in self.datasets],
            "methods": [m.to_dict() for m in self.methods],
            "encoder": asdict(self.encoder),
            "protocol": self.protocol.to_dict(),
            "output_dir": self.output_dir,
            "cache": self.cache,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return stable_hash(self.to_dict())

    @classmethod
    def from_dict(cls, doc, base_dir=None) -> SuiteConfig:
        return parse_config(doc, base_dir)

    def method(self, name: str) -> MethodSpec:
        return next(m for m in self.methods if m.name == name)


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# --------------------------------------------------------------------------- parsing


class _Errors:
    def __init__(self):
        self.items: list[str] = []

    def add(self, path: str, msg: str):
        self.items.append(f"{path}: {msg}")

    def unknown(self, path: str, doc: dict, allowed):
        for k in sorted(set(doc) - set(allowed)):
            self.add(f"{path}.{k}" if path else k, "unknown key")


def _parse_encoder(doc, path: str, err: _Errors, base: EncoderConfig | None = None):
    """Returns (validated overrides, EncoderConfig or None)."""
    if not isinstance(doc, dict):
        err.add(path, "must be an object")
        return {}, None
    err.unknown(path, doc, _ENCODER_KEYS)
    ok = {}
    for k, v in doc.items():
        if k not in _ENCODER_KEYS:
            continue
        if k == "propagation":
            good = isinstance(v, str)
        elif k in ("dropout_p", "learning_rate", "weight_decay"):
            good = _is_num(v)
        else:
            good = _is_int(v)
        if not good:
            err.add(f"{path}.{k}", f"invalid type {type(v).__name__}")
        else:
            ok[k] = float(v) if k in ("dropout_p", "learning_rate", "weight_decay") else v
    bad = False
    for k, v in ok.items():  # probe each field alone so the message names it
        try:
            EncoderConfig().replace(**{k: v})
        except GraphOODError as exc:
            err.add(f"{path}.{k}", str(exc))
            bad = True
    if bad:
        return ok, None
    try:
        cfg = (base or EncoderConfig()).replace(**ok)
    except GraphOODError as exc:
        err.add(path, str(exc))
        return ok, None
    return ok, cfg


def _parse_dataset(doc, path: str, err: _Errors, base_dir: Path | None):
    if not isinstance(doc, dict):
        err.add(path, "must be an object")
        return None
    err.unknown(path, doc, ("name", "path", "feature_mode", "generator"))
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        err.add(f"{path}.name", "required non-empty string")
        return None
    has_path, has_gen = "path" in doc, "generator" in doc
    if has_path == has_gen:
        err.add(path, "exactly one of 'path' or 'generator' is required")
        return None
    if has_gen:
        g = doc["generator"]
        if not isinstance(g, dict):
            err.add(f"{path}.generator", "must be an object")
            return None
        err.unknown(f"{path}.generator", g, ("per_class", "node_range", "seed"))
        spec = TrianglesSpec()
        per_class = g.get("per_class", spec.per_class)
        node_range = g.get("node_range", list(spec.node_range))
        seed = g.get("seed", spec.seed)
        n0 = len(err.items)
        if not _is_int(per_class) or per_class < 2:
            err.add(f"{path}.generator.per_class", "must be an integer >= 2")
        if (not isinstance(node_range, (list, tuple)) or len(node_range) != 2
                or not all(_is_int(v) for v in node_range) or not 4 <= node_range[0] <= node_range[1] <= 64):
            err.add(f"{path}.generator.node_range", "must be [lo, hi] with 4 <= lo <= hi <= 64")
        if not _is_int(seed):
            err.add(f"{path}.generator.seed", "must be an integer")
        if len(err.items) > n0:
            return None
        return DatasetSpec(name, generator=TrianglesSpec(per_class, tuple(node_range), seed))
    p, mode = doc["path"], doc.get("feature_mode", "auto")
    if not isinstance(p, str) or not p:
        err.add(f"{path}.path", "must be a non-empty string")
        return None
    if mode not in FEATURE_MODES:
        err.add(f"{path}.feature_mode", f"must be one of {FEATURE_MODES}")
        return None
    full = Path(p) if Path(p).is_absolute() or base_dir is None else base_dir / p
    if full.is_dir():
        if not (full / f"{name}_A.txt").exists():
            err.add(f"{path}.path", f"no TU files for {name!r} in {full}")
            return None
    elif not full.is_file():
        err.add(f"{path}.path", f"not found: {full}")
        return None
    return DatasetSpec(name, p, mode)


def _parse_method(doc, path: str, err: _Errors):
    if isinstance(doc, str):
        doc = {"name": doc}
    if not isinstance(doc, dict):
        err.add(path, "must be an object or a method name")
        return None
    name = doc.get("name")
    if name not in METHODS:
        err.add(path, f"unknown method {name!r}; expected one of {list(METHODS)}")
        return None
    defaults = METHOD_PARAMS[name]
    err.unknown(path, doc, ("name", "encoder", *defaults))
    params = dict(defaults)
    n0 = len(err.items)
    for k in defaults:
        if k not in doc:
            continue
        v = doc[k]
        if k == "bandwidth":
            good = v == "scott" or (_is_num(v) and v > 0)
        elif k == "budget":
            good = v is None or (_is_num(v) and v > 0)
        elif k in ("mc_samples", "ensemble_size", "latent_dim", "flow_layers", "finetune_steps"):
            good = _is_int(v) and v >= (2 if k == "ensemble_size" else (0 if k in ("flow_layers", "finetune_steps") else 1))
        else:
            good = _is_num(v) and v >= 0 and (k != "prior_beta" or v > 0)
        if not good:
            err.add(f"{path}.{k}", f"invalid value {v!r}")
        else:
            params[k] = float(v) if isinstance(defaults[k], float) else v
    enc, _ = _parse_encoder(doc.get("encoder", {}), f"{path}.encoder", err)
    if len(err.items) > n0:
        return None
    return MethodSpec(name, params, enc)


def _parse_protocol(doc, err: _Errors) -> ProtocolSpec:
    spec = ProtocolSpec()
    if not isinstance(doc, dict):
        err.add("protocol", "must be an object")
        return spec
    err.unknown("protocol", doc, [f.name for f in fields(ProtocolSpec)])
    kw = {}
    n_splits = doc.get("n_splits", spec.n_splits)
    if not _is_int(n_splits) or n_splits < 1:
        err.add("protocol.n_splits", "must be an integer >= 1")
    else:
        kw["n_splits"] = n_splits
    vf = doc.get("val_fraction", spec.val_fraction)
    if not _is_num(vf) or not 0 < vf < 1:
        err.add("protocol.val_fraction", "must be in (0, 1)")
    else:
        kw["val_fraction"] = float(vf)
    bs = doc.get("base_seed", spec.base_seed)
    if not _is_int(bs) or bs < 0:
        err.add("protocol.base_seed", "must be a non-negative integer")
    else:
        kw["base_seed"] = bs
    oc = doc.get("ood_classes")
    if oc is not None:
        if not isinstance(oc, list) or not oc:
            err.add("protocol.ood_classes", "must be null or a non-empty list of class indices")
        else:
            for i, c in enumerate(oc):
                if not _is_int(c) or c < 0:
                    err.add(f"protocol.ood_classes[{i}]", "must be a non-negative integer")
            if len(set(oc)) != len(oc):
                err.add("protocol.ood_classes", "duplicate class indices")
            kw["ood_classes"] = tuple(sorted(c for c in oc if _is_int(c)))
    for k in ("confusion_matrices", "distance_matrices", "embeddings", "keep_scores"):
        if k in doc:
            if not isinstance(doc[k], bool):
                err.add(f"protocol.{k}", "must be a boolean")
            else:
                kw[k] = doc[k]
    return ProtocolSpec(**kw)


def parse_config(doc, base_dir=None) -> SuiteConfig:
    """Validate and normalise a config document; raises ConfigError listing every problem."""
    err = _Errors()
    base = Path(base_dir) if base_dir is not None else None
    if not isinstance(doc, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    if "config" in doc and "config_hash" in doc:  # a run manifest
        doc = doc["config"]
    err.unknown("", doc, ("datasets", "methods", "encoder", "protocol", "output_dir", "cache"))

    datasets = []
    ds = doc.get("datasets")
    if not isinstance(ds, list) or not ds:
        err.add("datasets", "required non-empty list")
    else:
        for i, d in enumerate(ds):
            spec = _parse_dataset(d, f"datasets[{i}]", err, base)
            if spec is not None:
                if any(s.name == spec.name for s in datasets):
                    err.add(f"datasets[{i}].name", f"duplicate dataset {spec.name!r}")
                datasets.append(spec)

    methods = []
    ms = doc.get("methods")
    if not isinstance(ms, list) or not ms:
        err.add("methods", "required non-empty list")
    else:
        for i, m in enumerate(ms):
            spec = _parse_method(m, f"methods[{i}]", err)
            if spec is not None:
                if any(s.name == spec.name for s in methods):
                    err.add(f"methods[{i}].name", f"duplicate method {spec.name!r}")
                methods.append(spec)

    _, encoder = _parse_encoder(doc.get("encoder", {}), "encoder", err)
    protocol = _parse_protocol(doc.get("protocol", {}), err)
    out = doc.get("output_dir", "results")
    if not isinstance(out, str) or not out:
        err.add("output_dir", "must be a non-empty string")
    cache = doc.get("cache", "reuse")
    if cache not in CACHE_POLICIES:
        err.add("cache", f"must be one of {CACHE_POLICIES}")
    for m in methods:
        if encoder is not None and m.encoder:
            try:
                encoder.replace(**m.encoder)
            except GraphOODError as exc:
                err.add(f"methods[{methods.index(m)}].encoder", str(exc))
    if err.items:
        raise ConfigError(err.items)
    return SuiteConfig(tuple(datasets), tuple(methods), encoder, protocol, out, cache,
                       None if base is None else str(base))


def load_config(path) -> SuiteConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError([f"<file>: config not found: {p}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: invalid JSON at line {exc.lineno}: {exc.msg}"]) from None
    return parse_config(doc, p.resolve().parent)
