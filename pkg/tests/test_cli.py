import csv
import json
import shutil

import numpy as np
import pytest

from graphood.cli import main
from graphood.config import ConfigError, SuiteConfig, load_config, parse_config
from graphood.data import parse_tu_dataset
from graphood.errors import ReportError
from graphood.report import heatmap_svg, render_report
from graphood.runner import resolve_output_dir, run_suite


def small_config(out_dir, methods=("single",), **protocol):
    return {
        "datasets": [{"name": "TRIANGLES", "generator": {"per_class": 6, "node_range": [8, 12], "seed": 1}}],
        "methods": [{"name": m} for m in methods],
        "encoder": {"hidden_dim": 8, "max_epochs": 2, "batch_size": 8},
        "protocol": {"n_splits": 2, **protocol},
        "output_dir": str(out_dir),
    }


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def read_summary(out):
    with open(out / "summary.csv", newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def suite_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("suite")
    cfg = write_config(base / "cfg.json", small_config(base / "results"))
    assert main(["run", cfg, "--jobs", "1"]) == 0
    return base, cfg, base / "results"


# --------------------------------------------------------------------------- config


def test_config_roundtrip_and_hash_stability(tmp_path):
    cfg = parse_config(small_config("out", methods=("single", "de")))
    again = parse_config(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict() and again.hash() == cfg.hash()
    assert cfg.method("de").params["ensemble_size"] == 5
    assert isinstance(cfg, SuiteConfig)


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["methods"].__setitem__(0, {"name": "foo"}), "methods[0]"),
    (lambda d: d["encoder"].__setitem__("hidden_dim", -3), "encoder.hidden_dim"),
    (lambda d: d["protocol"].__setitem__("n_splits", 0), "protocol.n_splits"),
    (lambda d: d.__setitem__("bogus", 1), "bogus"),
    (lambda d: d.__setitem__("cache", "maybe"), "cache"),
])
def test_invalid_configs_name_the_field(mutate, path):
    doc = small_config("out")
    mutate(doc)
    with pytest.raises(ConfigError) as info:
        parse_config(doc)
    assert any(path in e for e in info.value.errors)


def test_bad_config_exits_2_without_outputs(tmp_path, capsys):
    doc = small_config(tmp_path / "results")
    doc["methods"] = [{"name": "foo"}]
    assert main(["run", write_config(tmp_path / "bad.json", doc)]) == 2
    assert "methods[0]" in capsys.readouterr().err
    assert not (tmp_path / "results").exists()


def test_ood_class_out_of_range_is_a_config_error(tmp_path):
    doc = small_config(tmp_path / "results", ood_classes=[12])
    assert main(["validate", write_config(tmp_path / "c.json", doc)]) == 2


def test_two_class_dataset_rejected(tmp_path, fixture_root):
    doc = small_config(tmp_path / "results")
    doc["datasets"] = [{"name": "FIXTURE", "path": str(fixture_root)}]
    assert main(["validate", write_config(tmp_path / "c.json", doc)]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    cfg = parse_config(small_config("results"))
    monkeypatch.delenv("GRAPHOOD_OUTPUT_ROOT", raising=False)
    monkeypatch.chdir(tmp_path)
    assert resolve_output_dir(cfg) == tmp_path / "results"
    monkeypatch.setenv("GRAPHOOD_OUTPUT_ROOT", str(tmp_path / "root"))
    assert resolve_output_dir(cfg) == tmp_path / "root" / "results"
    assert resolve_output_dir(parse_config(small_config("/abs/elsewhere"))) == tmp_path / "root" / "elsewhere"


# --------------------------------------------------------------------------- runs


def test_minimal_run_produces_every_cell(suite_run):
    _, _, out = suite_run
    rows = read_summary(out)
    assert len(rows) == 10 and {int(r["ood_class"]) for r in rows} == set(range(10))
    values = []
    for c in range(10):
        doc = json.loads((out / "TRIANGLES" / "single" / f"ood_{c}" / "result.json").read_text())
        values += doc["result"]["auroc"]["total"]
        assert (out / "TRIANGLES" / "single" / f"ood_{c}" / "scores_seed1.csv").exists()
        assert (out / "TRIANGLES" / "embeddings" / f"ood_{c}.csv").exists()
    assert len(values) == 20 and all(0.0 <= v <= 1.0 for v in values)
    assert (out / "TRIANGLES" / "single" / "confusion.csv").exists()
    assert (out / "TRIANGLES" / "distance_single.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1] and len(manifest["cells"]) == 10
    assert {"python", "numpy", "torch"} <= set(manifest["versions"])


def test_rerun_is_fully_cached(suite_run, capsys):
    _, cfg, out = suite_run
    before = (out / "summary.csv").read_bytes()
    assert main(["run", cfg, "--jobs", "1"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if "TRIANGLES/" in l]
    assert lines and all(l.startswith("cached") for l in lines)
    assert (out / "summary.csv").read_bytes() == before


def test_manifest_rerun_reproduces_summary(suite_run, tmp_path):
    _, _, out = suite_run
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["config"]["output_dir"] = str(tmp_path / "again")
    cfg = write_config(tmp_path / "manifest.json", manifest)
    assert main(["run", cfg, "--jobs", "1", "--force"]) == 0
    assert (tmp_path / "again" / "summary.csv").read_bytes() == (out / "summary.csv").read_bytes()
    assert load_config(cfg).hash() != ""


def test_parallel_run_matches_serial(tmp_path):
    doc = small_config(tmp_path / "serial", ood_classes=[0, 1], embeddings=False, distance_matrices=False)
    serial = run_suite(parse_config(doc), jobs=1)
    doc["output_dir"] = str(tmp_path / "parallel")
    parallel = run_suite(parse_config(doc), jobs=2)
    assert serial.exit_code == parallel.exit_code == 0
    assert (serial.out_dir / "summary.csv").read_bytes() == (parallel.out_dir / "summary.csv").read_bytes()


def test_failed_cell_gives_exit_1(tmp_path, monkeypatch):
    import graphood.protocol as protocol
    from graphood.errors import TrainingError

    def boom(*a, **k):
        raise TrainingError("loss became NaN", [])

    monkeypatch.setattr(protocol, "train_classifier", boom)
    doc = small_config(tmp_path / "results", ood_classes=[0], embeddings=False, distance_matrices=False)
    outcome = run_suite(parse_config(doc), jobs=1)
    assert outcome.exit_code == 1 and len(outcome.failed) == 1
    assert (outcome.out_dir / "TRIANGLES" / "single" / "ood_0" / "error.json").exists()


# --------------------------------------------------------------------------- report


def test_report_single_cell(tmp_path):
    doc = small_config(tmp_path / "results", ood_classes=[3], embeddings=False, distance_matrices=False)
    run_suite(parse_config(doc), jobs=1)
    rep = render_report(tmp_path / "results")
    assert len(rep.rows) == 1 and rep.rows[0]["ood_class"] == 3
    assert (tmp_path / "results" / "report" / "report.md").exists()


def test_report_is_byte_identical(suite_run, tmp_path):
    _, _, out = suite_run
    first = {p.name: p.read_bytes() for p in render_report(out, tmp_path / "a").files}
    second = {p.name: p.read_bytes() for p in render_report(out, tmp_path / "b").files}
    assert first == second
    assert "TRIANGLES_single_confusion.svg" in first and "TRIANGLES_distance_single.svg" in first


def test_report_lists_missing_cells(suite_run, tmp_path):
    _, _, out = suite_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (copy / "TRIANGLES" / "single" / "ood_4" / "result.json").unlink()
    with pytest.raises(ReportError, match="TRIANGLES/single/ood_4"):
        render_report(copy)
    assert main(["report", str(copy)]) == 1


def test_heatmap_grid_and_labels():
    m = np.arange(9, dtype=float).reshape(3, 3)
    svg = heatmap_svg(m, ["a", "b", "c"], ["a", "b", "c"], "t", ~np.eye(3, dtype=bool))
    assert svg.count("<rect") >= 9
    for name in ("a", "b", "c"):
        assert f">{name}<" in svg
    assert "7.00" in svg and "8.00" not in svg and svg == heatmap_svg(m, ["a", "b", "c"], ["a", "b", "c"], "t", ~np.eye(3, dtype=bool))


# --------------------------------------------------------------------------- generator


def test_gen_triangles_command(tmp_path):
    assert main(["gen-triangles", str(tmp_path), "--per-class", "3", "--seed", "2", "--min-nodes", "8",
                 "--max-nodes", "12"]) == 0
    d = parse_tu_dataset(tmp_path, "TRIANGLES")
    assert len(d) == 30 and d.num_classes == 10
    assert main(["gen-triangles", str(tmp_path / "x"), "--per-class", "2", "--min-nodes", "3",
                 "--max-nodes", "3"]) == 1
