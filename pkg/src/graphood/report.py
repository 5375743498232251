"""Summary tables and SVG heatmaps rendered from a result tree (pure function of the files)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ReportError
from .protocol import read_matrix_csv
from .runner import SUMMARY_COLUMNS, load_cell, summary_rows

CELL = 36
FONT = 11
LOW, HIGH = (247, 251, 255), (8, 48, 107)  # white to dark blue
MASKED = "#bdbdbd"


@dataclass
class Report:
    rows: list[dict]
    files: list[Path] = field(default_factory=list)


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    r, g, b = (round(lo + (hi - lo) * t) for lo, hi in zip(LOW, HIGH))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(matrix: np.ndarray, row_names, col_names, title: str = "", mask: np.ndarray | None = None,
                row_label: str = "", col_label: str = "") -> str:
    """C x C grid with class-name axes; masked cells are drawn grey without a value."""
    m = np.asarray(matrix, dtype=np.float64)
    nr, nc = m.shape
    mask = np.zeros_like(m, dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    shown = m[~mask]
    lo, hi = (float(shown.min()), float(shown.max())) if shown.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    left = 16 + int(0.62 * FONT * max((len(str(n)) for n in row_names), default=1)) + (FONT + 6 if row_label else 0)
    top = 28 + int(0.62 * FONT * max((len(str(n)) for n in col_names), default=1)) + (FONT + 6 if col_label else 0)
    width, height = left + nc * CELL + 12, top + nr * CELL + 12
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="{FONT}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        out.append(f'<text x="{width // 2}" y="16" text-anchor="middle" font-weight="bold">{escape(title)}</text>')
    if col_label:
        out.append(f'<text x="{left + nc * CELL // 2}" y="{16 + FONT + 4}" text-anchor="middle">{escape(col_label)}</text>')
    if row_label:
        cy = top + nr * CELL // 2
        out.append(f'<text x="{FONT + 2}" y="{cy}" text-anchor="middle" transform="rotate(-90 {FONT + 2} {cy})">'
                   f'{escape(row_label)}</text>')
    for j, name in enumerate(col_names):
        x, y = left + j * CELL + CELL // 2, top - 6
        out.append(f'<text x="{x}" y="{y}" transform="rotate(-60 {x} {y})">{escape(str(name))}</text>')
    for i, name in enumerate(row_names):
        out.append(f'<text x="{left - 6}" y="{top + i * CELL + CELL // 2 + FONT // 3}" text-anchor="end">'
                   f'{escape(str(name))}</text>')
    for i in range(nr):
        for j in range(nc):
            x, y = left + j * CELL, top + i * CELL
            if mask[i, j]:
                out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{MASKED}" stroke="white"/>')
                continue
            t = (m[i, j] - lo) / span
            out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{_color(t)}" stroke="white"/>')
            ink = "white" if t > 0.55 else "black"
            out.append(f'<text x="{x + CELL // 2}" y="{y + CELL // 2 + FONT // 3}" text-anchor="middle" '
                       f'font-size="{FONT - 2}" fill="{ink}">{m[i, j]:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _markdown(dataset: str, rows: list[dict], class_names: list[str] | None) -> str:
    classes = sorted({r["ood_class"] for r in rows})
    keys = list(dict.fromkeys((r["method"], r["unc_type"]) for r in rows))
    cell = {(r["method"], r["unc_type"], r["ood_class"]): r for r in rows}

    def head(c):
        return class_names[c] if class_names and c < len(class_names) else str(c)

    lines = [f"## {dataset}", "", "AUROC (mean ± std over splits) by held-out class", "",
             "| method | unc_type | " + " | ".join(head(c) for c in classes) + " |",
             "|---|---|" + "---|" * len(classes)]
    for m, t in keys:
        vals = []
        for c in classes:
            r = cell.get((m, t, c))
            vals.append("" if r is None else f"{float(r['auroc_mean']):.3f} ± {float(r['auroc_std']):.3f}")
        lines.append(f"| {m} | {t} | " + " | ".join(vals) + " |")
    return "\n".join(lines) + "\n"


def render_report(results_dir, out_dir=None) -> Report:
    """Per-dataset AUROC tables (CSV + markdown) and heatmaps of every confusion/distance CSV."""
    root = Path(results_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ReportError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    expected = [(c["dataset"], c["method"], int(c["ood_class"])) for c in manifest.get("cells", [])]
    results, missing = [], []
    for ds, m, c in expected:
        r = load_cell(root, ds, m, c)
        if r is None:
            missing.append(f"{ds}/{m}/ood_{c}")
        else:
            results.append(r)
    if missing:
        raise ReportError("missing result files for cells: " + ", ".join(missing))

    out = Path(out_dir) if out_dir is not None else root / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(results)
    report = Report(rows)
    datasets = list(dict.fromkeys(r["dataset"] for r in rows))
    md = ["# AUROC summary", ""]
    for ds in datasets:
        ds_rows = sorted((r for r in rows if r["dataset"] == ds),
                         key=lambda r: (r["method"], r["unc_type"], r["ood_class"]))
        path = out / f"auroc_{ds}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(ds_rows)
        report.files.append(path)
        names = _class_names(root / ds)
        md.append(_markdown(ds, ds_rows, names))
    for csv_path in sorted(root.glob("*/*/confusion.csv")):
        ds, method = csv_path.parent.parent.name, csv_path.parent.name
        m, names = read_matrix_csv(csv_path)
        svg = heatmap_svg(m, names, names, f"{ds} / {method}: OOD confusion", ~np.eye(len(names), dtype=bool),
                          "held-out class", "predicted class")
        report.files.append(_write(out / f"{ds}_{method}_confusion.svg", svg))
    for csv_path in sorted(root.glob("*/distance_*.csv")):
        ds, kind = csv_path.parent.name, csv_path.stem.removeprefix("distance_")
        m, names = read_matrix_csv(csv_path)
        svg = heatmap_svg(m, names, names, f"{ds} / {kind}: centroid distances")
        report.files.append(_write(out / f"{ds}_distance_{kind}.svg", svg))
    report.files.append(_write(out / "report.md", "\n".join(md)))
    return report


def _class_names(dataset_dir: Path) -> list[str] | None:
    for p in sorted(dataset_dir.glob("*/confusion.csv")) + sorted(dataset_dir.glob("distance_*.csv")):
        return read_matrix_csv(p)[1]
    return None


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path
