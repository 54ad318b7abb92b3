"""Report files: JSON summary, long-format CSV tables, SVG charts, contact sheets."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from PIL import Image, ImageDraw

from .dataset import DatasetManifest, load_image
from .ranking import SpuriosityRanking

CSV_FIELDS = ["backbone_id", "strategy", "label", "k", "family", "i", "alpha", "region",
              "variant", "accuracy", "n", "excluded"]
SUMMARY_FIELDS = ["backbone_id", "strategy", "label", "k", "stratified_mean", "clean_accuracy",
                  "ood_restricted", "train_objective", "train_iterations", "train_status",
                  "train_accuracy"]
SERIES_COLORS = {"top": "#1f77b4", "mid": "#2ca02c", "bot": "#d62728", "rnd": "#7f7f7f"}


def result_rows(result: dict) -> list[dict]:
    """Long-format rows: one per slice, one per (alpha, region), two for OOD."""
    base = {k: result[k] for k in ("backbone_id", "strategy", "label", "k")}
    rows = []
    for s in result["stratified"]["slices"]:
        rows.append({**base, "family": "slice", "i": s["index"], "accuracy": s["accuracy"],
                     "n": s["n"]})
    if result.get("noise"):
        for r in result["noise"]["rows"]:
            rows.append({**base, "family": "noise", "alpha": r["alpha"], "region": r["region"],
                         "accuracy": r["accuracy"], "n": r["n"], "excluded": r["excluded"]})
    if result.get("ood"):
        o = result["ood"]
        for variant in ("restricted", "unrestricted"):
            rows.append({**base, "family": "ood", "variant": variant,
                         "accuracy": o[f"{variant}_accuracy"], "n": o["n"]})
    return rows


def _write_csv(path: Path, fields: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({f: ("" if row.get(f) is None else row.get(f)) for f in fields})


def load_results_csv(path: str | os.PathLike) -> list[dict]:
    """Read results.csv back with numeric columns typed (floats round-trip exactly)."""
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            typed = {}
            for k, v in row.items():
                if v == "":
                    typed[k] = None
                elif k in ("k", "i", "n", "excluded"):
                    typed[k] = int(v)
                elif k in ("alpha", "accuracy"):
                    typed[k] = float(v)
                else:
                    typed[k] = v
            out.append(typed)
    return out


def emit_report(report, out_dir: str | os.PathLike,
                formats: Sequence[str] = ("json", "csv", "svg")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory {out} is not writable")
    written = []
    data = report.to_json() if hasattr(report, "to_json") else report
    results = data["results"]
    if "json" in formats:
        p = out / "summary.json"
        p.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(p)
    if "csv" in formats:
        p = out / "results.csv"
        _write_csv(p, CSV_FIELDS, [row for r in results for row in result_rows(r)])
        written.append(p)
        p = out / "summary.csv"
        _write_csv(p, SUMMARY_FIELDS, [{
            **{k: r[k] for k in ("backbone_id", "strategy", "label", "k")},
            "stratified_mean": r["stratified"]["mean"],
            "clean_accuracy": r["noise"]["clean_accuracy"] if r.get("noise") else None,
            "ood_restricted": r["ood"]["restricted_accuracy"] if r.get("ood") else None,
            "train_objective": r["train"]["objective"],
            "train_iterations": r["train"]["iterations"],
            "train_status": r["train"]["status"],
            "train_accuracy": r["train"]["train_accuracy"],
        } for r in results])
        written.append(p)
    if "svg" in formats:
        written += _emit_svgs(results, out / "plots")
    return written


# --------------------------------------------------------------------------
# SVG

def line_chart_svg(series: dict[str, list[tuple[float, float]]], title: str, xlabel: str,
                   ylabel: str = "accuracy", dashed_means: bool = True,
                   width: int = 640, height: int = 400) -> str:
    """One polyline per series; a dashed horizontal line at each series' mean."""
    ml, mr, mt, mb = 60, 110, 36, 48
    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1.0
    y0, y1 = 0.0, 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y0) / (y1 - y0) * (height - mt - mb)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
             f'{escape(title)}</text>',
             f'<line x1="{ml}" y1="{py(0):.2f}" x2="{width - mr}" y2="{py(0):.2f}" stroke="black"/>',
             f'<line x1="{ml}" y1="{py(0):.2f}" x2="{ml}" y2="{py(1):.2f}" stroke="black"/>',
             f'<text x="{(ml + width - mr) / 2:.1f}" y="{height - 10}" text-anchor="middle" '
             f'font-size="12">{escape(xlabel)}</text>',
             f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
             f'transform="rotate(-90 14 {height / 2:.1f})">{escape(ylabel)}</text>']
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{ml - 6}" y="{py(t) + 4:.2f}" text-anchor="end" '
                     f'font-size="10">{t:.2f}</text>')
    for j, (name, pts) in enumerate(series.items()):
        color = SERIES_COLORS.get(name.split()[0], "#9467bd")
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{coords}"/>')
        if dashed_means and pts:
            m = sum(y for _, y in pts) / len(pts)
            parts.append(f'<line x1="{ml}" y1="{py(m):.2f}" x2="{width - mr}" y2="{py(m):.2f}" '
                         f'stroke="{color}" stroke-dasharray="6,4"/>')
        ly = mt + 16 * j
        parts.append(f'<line x1="{width - mr + 8}" y1="{ly}" x2="{width - mr + 28}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - mr + 32}" y="{ly + 4}" font-size="11">'
                     f'{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)[:60]


def _emit_svgs(results: list[dict], plot_dir: Path) -> list[Path]:
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    groups: dict[tuple[str, int], list[dict]] = {}
    for r in results:
        groups.setdefault((r["backbone_id"], r["k"]), []).append(r)
    for (bb, k), rs in sorted(groups.items()):
        series = {r["label"]: [(s["index"], s["accuracy"]) for s in r["stratified"]["slices"]]
                  for r in rs}
        p = plot_dir / f"slices-{_slug(bb)}-k{k}.svg"
        p.write_text(line_chart_svg(series, f"accuracy by spuriosity rank ({bb}, k={k})",
                                    "rank i"), encoding="utf-8")
        written.append(p)
        regions = sorted({row["region"] for r in rs if r.get("noise") for row in r["noise"]["rows"]})
        for region in regions:
            series = {}
            for r in rs:
                pts = [(0.0, r["noise"]["clean_accuracy"])]
                pts += [(row["alpha"], row["accuracy"]) for row in r["noise"]["rows"]
                        if row["region"] == region and row["accuracy"] is not None]
                series[r["label"]] = sorted(pts)
            p = plot_dir / f"noise-{region}-{_slug(bb)}-k{k}.svg"
            p.write_text(line_chart_svg(series, f"{region} noise ({bb}, k={k})", "alpha"),
                         encoding="utf-8")
            written.append(p)
    return written


# --------------------------------------------------------------------------
# contact sheet

def emit_contact_sheet(ranking: SpuriosityRanking, manifest: DatasetManifest, class_id: int,
                       n_low_spur: int, n_high_spur: int, out_path: str | os.PathLike,
                       tile: int = 128) -> list[tuple[str, int, float]]:
    """Grid with the most spurious images on the left and the clearest on the right.

    Left panel: the ``n_high_spur`` lowest-score images; right panel: the
    ``n_low_spur`` highest-score images.  Scores increase left to right, so
    reading right to left follows the ranking file.  Returns the tiles as
    ``(image_id, rank, score)`` in left-to-right order.
    """
    if class_id not in ranking.per_class:
        raise ValueError(f"unknown class {class_id}")
    ids = ranking.per_class[class_id]
    n = len(ids)
    if n_low_spur < 0 or n_high_spur < 0 or n_low_spur + n_high_spur == 0:
        raise ValueError("need at least one tile")
    if n < n_low_spur + n_high_spur:
        raise ValueError(f"class {class_id} has {n} images, need {n_low_spur + n_high_spur}")
    left = [(ids[r - 1], r) for r in range(n, n - n_high_spur, -1)]
    right = [(ids[r - 1], r) for r in range(n_low_spur, 0, -1)]
    tiles = [(iid, r, ranking.scores[iid]) for iid, r in left + right]

    by_id = manifest.by_id()
    gap = 24 if left and right else 0
    label_h, head_h = 16, 22
    width = tile * len(tiles) + gap
    sheet = Image.new("RGB", (width, head_h + tile + label_h), "white")
    draw = ImageDraw.Draw(sheet)
    if left:
        draw.text((4, 4), "high spuriosity (low score)", fill="black")
    if right:
        draw.text((tile * len(left) + gap + 4, 4), "low spuriosity (high score)", fill="black")
    for j, (iid, rank, score) in enumerate(tiles):
        x = tile * j + (gap if j >= len(left) else 0)
        img = load_image(manifest.path_of(by_id[iid]))
        im = Image.fromarray((img * 255).round().astype("uint8")).resize((tile, tile),
                                                                         Image.NEAREST)
        sheet.paste(im, (x, head_h))
        draw.text((x + 3, head_h + tile + 2), f"#{rank} s={score:.3f}", fill="black")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(out_path, format="PNG")
    return tiles
