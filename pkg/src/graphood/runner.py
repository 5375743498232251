"""Suite orchestration: cells, on-disk cache, worker pool, summary and manifest.

A cell is one (dataset, method, ood_class) protocol run. Cells sharing a dataset and OOD class
are executed together so that single, mc, nuq and de reuse the same trained encoders.

Result tree::

    <out>/manifest.json
    <out>/summary.csv
    <out>/<dataset>/<method>/results.json
    <out>/<dataset>/<method>/confusion.csv          (when every class was held out)
    <out>/<dataset>/<method>/ood_<c>/result.json   (per cell, carries its cache key)
    <out>/<dataset>/<method>/ood_<c>/scores_seed<s>.csv
    <out>/<dataset>/distance_<single|natpn>.csv
    <out>/<dataset>/embeddings/ood_<c>.csv
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import scipy
import torch

from . import __version__
from .config import DatasetSpec, MethodSpec, SuiteConfig, parse_config, stable_hash
from .data import GraphDataset, make_loco_split
from .errors import ConfigError
from .methods import UNCERTAINTY_TYPES
from .protocol import (
    ExperimentResult,
    ModelCache,
    averaged_distance_matrix,
    confusion_from_results,
    export_embeddings,
    run_loco_experiment,
    split_encoder,
    write_matrix_csv,
    write_score_csv,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "GRAPHOOD_OUTPUT_ROOT"
SUMMARY_COLUMNS = ("dataset", "method", "ood_class", "unc_type", "auroc_mean", "auroc_std")


def resolve_output_dir(cfg: SuiteConfig) -> Path:
    """Relative output dirs resolve under $GRAPHOOD_OUTPUT_ROOT (default: cwd); the variable also
    re-roots absolute ones, keeping their last component."""
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / (out.name if out.is_absolute() else out)
    return out if out.is_absolute() else Path.cwd() / out


def versions() -> dict:
    return {"graphood": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__}


def cell_dir(out: Path, dataset: str, method: str, ood_class: int) -> Path:
    return out / dataset / method / f"ood_{ood_class}"


def cell_key(cfg: SuiteConfig, ds: DatasetSpec, m: MethodSpec, ood_class: int) -> str:
    p = cfg.protocol
    return stable_hash({
        "dataset": ds.to_dict(),
        "method": m.experiment_config(cfg.encoder, p).to_dict() | {"name": m.name},
        "ood_class": ood_class,
        "protocol": {"n_splits": p.n_splits, "val_fraction": p.val_fraction, "base_seed": p.base_seed,
                     "keep_scores": p.keep_scores},
        "version": __version__,
    })


def _embedding_method(cfg: SuiteConfig) -> MethodSpec:
    """Encoder settings for embedding exports and the shared distance matrix."""
    for m in cfg.methods:
        if m.name == "single":
            return m
    return MethodSpec("single")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _keyed_fresh(path: Path, key: str) -> bool:
    side = path.with_name(path.name + ".key")
    return path.exists() and side.exists() and side.read_text().strip() == key


def _mark_key(path: Path, key: str) -> None:
    path.with_name(path.name + ".key").write_text(key + "\n")


def is_cached(out: Path, cfg: SuiteConfig, ds: DatasetSpec, m: MethodSpec, c: int) -> bool:
    doc = _read_json(cell_dir(out, ds.name, m.name, c) / "result.json")
    return doc is not None and doc.get("key") == cell_key(cfg, ds, m, c)


# --------------------------------------------------------------------------- worker side

_DATASETS: dict[str, GraphDataset] = {}


def _dataset(spec: DatasetSpec, base_dir) -> GraphDataset:
    k = stable_hash(spec.to_dict())
    if k not in _DATASETS:
        _DATASETS[k] = spec.load(None if base_dir is None else Path(base_dir))
    return _DATASETS[k]


@dataclass
class CellOutcome:
    dataset: str
    method: str
    ood_class: int
    status: str  # "ran", "cached" or "failed"
    error: str | None = None


@dataclass
class _Task:
    config: dict
    base_dir: str | None
    out: str
    dataset: str
    ood_class: int | None  # None: distance-matrix task
    methods: list[str] = field(default_factory=list)
    force: bool = False


def _run_group(task: _Task) -> list[CellOutcome]:
    torch.set_num_threads(1)
    cfg = parse_config(task.config, task.base_dir)
    ds = next(s for s in cfg.datasets if s.name == task.dataset)
    d = _dataset(ds, task.base_dir)
    out = Path(task.out)
    cache = ModelCache()
    p = cfg.protocol
    if task.ood_class is None:
        return _run_distance(cfg, ds, d, out, task.methods, cache, task.force)
    outcomes = []
    for name in task.methods:
        m = cfg.method(name)
        c = task.ood_class
        cdir = cell_dir(out, ds.name, name, c)
        key = cell_key(cfg, ds, m, c)
        try:
            r = run_loco_experiment(d, name, c, p.n_splits, p.base_seed, m.experiment_config(cfg.encoder, p),
                                    cache, keep_scores=p.keep_scores)
        except Exception as exc:  # recorded per cell; the remaining cells continue
            log.error("%s/%s ood=%d failed: %s", ds.name, name, c, exc)
            partial = getattr(exc, "partial", None)
            cdir.mkdir(parents=True, exist_ok=True)
            (cdir / "result.json").unlink(missing_ok=True)
            _write_json(cdir / "error.json", {"key": key, "error": f"{type(exc).__name__}: {exc}",
                                              "partial": None if partial is None else partial.to_dict()})
            outcomes.append(CellOutcome(ds.name, name, c, "failed", str(exc)))
            continue
        cdir.mkdir(parents=True, exist_ok=True)
        (cdir / "error.json").unlink(missing_ok=True)
        for seed, rows in zip(r.seeds, r.score_rows):
            write_score_csv(cdir / f"scores_seed{seed}.csv", rows)
        _write_json(cdir / "result.json", {"key": key, "result": r.to_dict()})
        outcomes.append(CellOutcome(ds.name, name, c, "ran"))
    if p.embeddings:
        _export_embeddings(cfg, ds, d, task.ood_class, out, cache, task.force)
    return outcomes


def _embedding_target(cfg, ds, c, out) -> tuple[Path, str]:
    ecfg = _embedding_method(cfg).experiment_config(cfg.encoder, cfg.protocol)
    key = stable_hash({"dataset": ds.to_dict(), "cfg": ecfg.to_dict(), "ood_class": c,
                       "seed": cfg.protocol.base_seed, "version": __version__})
    return out / ds.name / "embeddings" / f"ood_{c}.csv", key


def _distance_target(cfg, ds, kind, out) -> tuple[Path, str]:
    p = cfg.protocol
    m = cfg.method("natpn") if kind == "natpn" else _embedding_method(cfg)
    key = stable_hash({"dataset": ds.to_dict(), "cfg": m.experiment_config(cfg.encoder, p).to_dict(), "kind": kind,
                       "n_splits": p.n_splits, "base_seed": p.base_seed, "version": __version__})
    return out / ds.name / f"distance_{kind}.csv", key


def _export_embeddings(cfg, ds, d, c, out, cache, force):
    ecfg = _embedding_method(cfg).experiment_config(cfg.encoder, cfg.protocol)
    path, key = _embedding_target(cfg, ds, c, out)
    if not force and _keyed_fresh(path, key):
        return
    try:
        split = make_loco_split(d, c, cfg.protocol.val_fraction, cfg.protocol.base_seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        export_embeddings(split_encoder(d, split, ecfg, cache), split, d, path)
        _mark_key(path, key)
    except Exception as exc:
        log.error("embedding export %s ood=%d failed: %s", ds.name, c, exc)


def _run_distance(cfg, ds, d, out, kinds, cache, force) -> list[CellOutcome]:
    outcomes = []
    p = cfg.protocol
    for kind in kinds:
        m = cfg.method("natpn") if kind == "natpn" else _embedding_method(cfg)
        ecfg = m.experiment_config(cfg.encoder, p)
        path, key = _distance_target(cfg, ds, kind, out)
        if not force and _keyed_fresh(path, key):
            outcomes.append(CellOutcome(ds.name, f"distance_{kind}", -1, "cached"))
            continue
        try:
            dm = averaged_distance_matrix(d, kind, ecfg, p.base_seed, p.n_splits, cache)
        except Exception as exc:
            log.error("distance matrix %s/%s failed: %s", ds.name, kind, exc)
            outcomes.append(CellOutcome(ds.name, f"distance_{kind}", -1, "failed", str(exc)))
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        write_matrix_csv(path, dm.matrix, dm.class_names)
        _mark_key(path, key)
        outcomes.append(CellOutcome(ds.name, f"distance_{kind}", -1, "ran"))
    return outcomes


# --------------------------------------------------------------------------- coordinator


@dataclass
class SuiteOutcome:
    out_dir: Path
    cells: list[CellOutcome]

    @property
    def failed(self) -> list[CellOutcome]:
        return [c for c in self.cells if c.status == "failed"]

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def _ood_classes(cfg: SuiteConfig, d: GraphDataset) -> list[int]:
    return list(range(d.num_classes)) if cfg.protocol.ood_classes is None else list(cfg.protocol.ood_classes)


def check_datasets(cfg: SuiteConfig) -> dict[str, GraphDataset]:
    """Load every dataset and check the protocol can run on it; raises ConfigError."""
    errors, loaded = [], {}
    for i, ds in enumerate(cfg.datasets):
        try:
            d = _dataset(ds, cfg.base_dir)
        except Exception as exc:
            errors.append(f"datasets[{i}]: cannot load: {exc}")
            continue
        if d.num_classes < 3:
            errors.append(f"datasets[{i}]: leave-one-class-out needs >= 3 classes, {ds.name} has {d.num_classes}")
        for j, c in enumerate(cfg.protocol.ood_classes or ()):
            if c >= d.num_classes:
                errors.append(f"protocol.ood_classes[{j}]: class {c} out of range for {ds.name} ({d.num_classes} classes)")
        loaded[ds.name] = d
    if errors:
        raise ConfigError(errors)
    return loaded


def portable_config(cfg: SuiteConfig) -> dict:
    """Config document with dataset paths made absolute, so a manifest can be re-run from anywhere."""
    doc = cfg.to_dict()
    for spec in doc["datasets"]:
        if "path" in spec and cfg.base_dir is not None and not Path(spec["path"]).is_absolute():
            spec["path"] = str((Path(cfg.base_dir) / spec["path"]).resolve())
    return doc


def run_suite(cfg: SuiteConfig, force: bool = False, jobs: int | None = None, out_dir=None) -> SuiteOutcome:
    """Run every (dataset, method, ood_class) cell not already cached; see the module docstring for outputs."""
    doc = portable_config(cfg)
    cfg = parse_config(doc)  # cache keys are computed on absolute dataset paths, as in the workers
    datasets = check_datasets(cfg)
    out = Path(out_dir) if out_dir is not None else resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    force = force or cfg.cache == "off"

    cells: list[CellOutcome] = []
    tasks: list[_Task] = []
    for ds in cfg.datasets:
        d = datasets[ds.name]
        for c in _ood_classes(cfg, d):
            todo = []
            for m in cfg.methods:
                if not force and is_cached(out, cfg, ds, m, c):
                    cells.append(CellOutcome(ds.name, m.name, c, "cached"))
                else:
                    todo.append(m.name)
            stale_emb = cfg.protocol.embeddings and (force or not _keyed_fresh(*_embedding_target(cfg, ds, c, out)))
            if todo or stale_emb:
                tasks.append(_Task(doc, None, str(out), ds.name, c, todo, force))
        if cfg.protocol.distance_matrices:
            kinds = sorted({"natpn" if m.name == "natpn" else "single" for m in cfg.methods})
            stale = [k for k in kinds if force or not _keyed_fresh(*_distance_target(cfg, ds, k, out))]
            for k in kinds:
                if k not in stale:
                    cells.append(CellOutcome(ds.name, f"distance_{k}", -1, "cached"))
            if stale:
                tasks.append(_Task(doc, None, str(out), ds.name, None, stale, force))

    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(tasks) <= 1:
        for t in tasks:
            cells.extend(_run_group(t))
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks)), mp_context=get_context("spawn")) as pool:
            for res in pool.map(_run_group, tasks):
                cells.extend(res)

    _write_aggregates(cfg, datasets, out)
    order = {(ds.name, m.name): i for i, (ds, m) in
             enumerate((ds, m) for ds in cfg.datasets for m in cfg.methods)}
    cells.sort(key=lambda c: (order.get((c.dataset, c.method), len(order)), c.method, c.ood_class))
    _write_json(out / "manifest.json", {
        "config": doc,
        "config_hash": stable_hash(doc),
        "seeds": [cfg.protocol.base_seed + s for s in range(cfg.protocol.n_splits)],
        "versions": versions(),
        "cells": [{"dataset": c.dataset, "method": c.method, "ood_class": c.ood_class,
                   "key": cell_key(cfg, cfg.datasets[[s.name for s in cfg.datasets].index(c.dataset)],
                                   cfg.method(c.method), c.ood_class),
                   "status": "failed" if c.status == "failed" else "ok"}
                  for c in cells if c.ood_class >= 0],
    })
    return SuiteOutcome(out, cells)


def load_cell(out: Path, dataset: str, method: str, ood_class: int) -> ExperimentResult | None:
    doc = _read_json(cell_dir(out, dataset, method, ood_class) / "result.json")
    return None if doc is None else ExperimentResult.from_dict(doc["result"])


def summary_rows(results: list[ExperimentResult]) -> list[dict]:
    rows = []
    for r in results:
        mean, std = r.auroc_mean, r.auroc_std
        for t in UNCERTAINTY_TYPES[r.method]:
            if t in mean:
                rows.append({"dataset": r.dataset, "method": r.method, "ood_class": r.ood_class, "unc_type": t,
                             "auroc_mean": repr(mean[t]), "auroc_std": repr(std[t])})
    return rows


def write_summary_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _write_aggregates(cfg: SuiteConfig, datasets: dict[str, GraphDataset], out: Path) -> None:
    """Single-writer reduction over the per-cell files."""
    all_results = []
    for ds in cfg.datasets:
        d = datasets[ds.name]
        for m in cfg.methods:
            results, failed = [], []
            for c in _ood_classes(cfg, d):
                r = load_cell(out, ds.name, m.name, c)
                if r is None:
                    failed.append(c)
                else:
                    results.append(r)
            _write_json(out / ds.name / m.name / "results.json",
                        {"dataset": ds.name, "method": m.name, "results": [r.to_dict() for r in results],
                         "failed_ood_classes": failed})
            all_results.extend(results)
            conf = out / ds.name / m.name / "confusion.csv"
            if cfg.protocol.confusion_matrices and not failed and len(results) == d.num_classes:
                cm = confusion_from_results(results, d)
                write_matrix_csv(conf, cm.matrix, cm.class_names)
            else:
                conf.unlink(missing_ok=True)
    write_summary_csv(out / "summary.csv", summary_rows(all_results))

