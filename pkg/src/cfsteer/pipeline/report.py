"""Static HTML reports with side-by-side image grids."""

from __future__ import annotations

import html
import json
from pathlib import Path

import numpy as np
from PIL import Image

COLUMNS = ("x", "x_l1", "mask", "x_initial", "x_final")
HEADERS = ("original", "l1 counterfactual", "mask", "initial", "refined")


def _tile(arr, scale):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[None].astype(np.float64), 3, axis=0)
    pixels = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    img = Image.fromarray(pixels)
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def image_grid(rows, scale=2, pad=2):
    """Grid image: one row per sample, one column per entry of COLUMNS."""
    if not rows:
        return None
    tiles = [[_tile(r[c], scale) for c in COLUMNS] for r in rows]
    h, w = tiles[0][0].height, tiles[0][0].width
    grid = Image.new("RGB", (len(COLUMNS) * (w + pad) + pad, len(rows) * (h + pad) + pad), (255, 255, 255))
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            grid.paste(tile, (pad + j * (w + pad), pad + i * (h + pad)))
    return grid


def _load_rows(run_dir, missing, max_rows):
    from ..refine import load_mask_png

    index_path = run_dir / "samples" / "index.json"
    if not index_path.exists():
        missing.append("samples/index.json")
        return []
    rows = []
    for entry in json.loads(index_path.read_text())[:max_rows]:
        sample, mask = run_dir / entry["sample"], run_dir / entry["mask"]
        if not sample.exists() or not mask.exists():
            missing.append(entry["sample"] if not sample.exists() else entry["mask"])
            continue
        with np.load(sample) as d:
            row = {k: d[k] for k in ("x", "x_l1", "x_initial", "x_final")}
        row["mask"] = load_mask_png(mask).astype(np.float64)
        row["sample_id"] = entry["sample_id"]
        rows.append(row)
    return rows


def _table(mapping):
    cells = "".join(
        f"<tr><th>{html.escape(str(k))}</th><td>{html.escape(_fmt(v))}</td></tr>" for k, v in mapping.items()
    )
    return f"<table>{cells}</table>"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _run_section(run_dir, missing, max_rows, prefix=""):
    parts = []
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists():
        data = json.loads(metrics_path.read_text())
        parts.append("<h2>Metrics</h2>" + _table(data["summary"]))
        meta = {k: v for k, v in data.get("meta", {}).items() if not isinstance(v, (dict, list))}
        parts.append("<h3>Run details</h3>" + _table(meta))
        fails = data.get("meta", {}).get("failures", [])
        if fails:
            parts.append("<h3>Failed samples</h3>" + _table({f["sample_id"]: f["error"] for f in fails}))
    else:
        missing.append(prefix + "metrics.json")
    rows = _load_rows(run_dir, missing, max_rows)
    if rows:
        grid = image_grid(rows)
        name = "grid.png"
        grid.save(run_dir / name)
        heads = " | ".join(HEADERS)
        parts.append(f"<h2>Samples</h2><p>Columns: {heads}</p><img src=\"{prefix}{name}\" alt=\"grid\">")
    return parts


def emit_report(run_dir, max_rows=None):
    """Write report.html (and grid.png) for a run or sweep directory; returns the HTML path."""
    run_dir = Path(run_dir)
    missing = []
    body = [f"<h1>Counterfactual report: {html.escape(run_dir.name)}</h1>"]
    sweep_path = run_dir / "sweep.json"
    if sweep_path.exists():
        sweep = json.loads(sweep_path.read_text())
        table = "".join(
            "<tr>" + "".join(f"<td>{html.escape(_fmt(r[k]))}</td>" for k in ("alpha", "fr", "fid", "cd", "cout", "s3"))
            + "</tr>" for r in sweep["runs"]
        )
        body.append(
            "<h2>Spurious-weight sweep</h2><table><tr><th>alpha</th><th>FR</th><th>FID</th>"
            f"<th>CD</th><th>COUT</th><th>S3</th></tr>{table}</table>"
        )
        for plot in ("fr_vs_alpha.png", "fid_vs_alpha.png"):
            if (run_dir / plot).exists():
                body.append(f"<img src=\"{plot}\" alt=\"{plot}\">")
            else:
                missing.append(plot)
        for r in sweep["runs"]:
            sub = run_dir / r["run"]
            body.append(f"<h2>alpha = {r['alpha']:g}</h2>")
            body += _run_section(sub, missing, max_rows, prefix=f"{r['run']}/")
    else:
        body += _run_section(run_dir, missing, max_rows)
    if missing:
        items = "".join(f"<li>{html.escape(m)}</li>" for m in missing)
        body.append(f"<h2>Missing assets</h2><ul>{items}</ul>")
    page = (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>report</title>"
        "<style>body{font-family:sans-serif}td,th{padding:2px 8px;text-align:left}"
        "img{image-rendering:pixelated}</style></head><body>\n"
        + "\n".join(body)
        + "\n</body></html>\n"
    )
    out = run_dir / "report.html"
    out.write_text(page)
    return out
