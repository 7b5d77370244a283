"""Spurious-weight sweeps: one full run per grid value, everything else shared."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from ..errors import ConfigError
from .artifacts import load_artifacts
from .run import new_run_dir, run_experiment

log = logging.getLogger(__name__)


def check_grid(grid):
    grid = [float(a) for a in grid]
    if not grid:
        raise ConfigError("must be non-empty", "grid")
    if grid != sorted(grid) or len(set(grid)) != len(grid):
        raise ConfigError("must be strictly ascending", "grid")
    if grid[0] != 0.0:
        raise ConfigError("must contain 0", "grid")
    return grid


def sweep_alpha(config, grid, artifacts=None, sweep_dir=None):
    """Run the pipeline for each spurious weight; returns (sweep directory, summary dict)."""
    grid = check_grid(grid)
    config.validate()
    artifacts = artifacts or load_artifacts(config)
    sweep_dir = Path(sweep_dir) if sweep_dir is not None else new_run_dir(config, prefix="sweep-")
    sweep_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for alpha in grid:
        cfg = config.with_changes(**{"steering.spurious_weight": alpha})
        run_dir, report = run_experiment(cfg, artifacts, sweep_dir / f"alpha-{alpha:g}")
        rows.append({"alpha": alpha, "run": run_dir.name, **report.summary(),
                     "fr_initial": report.meta["fr_initial"], "cd_initial": report.meta["cd_initial"]})
        log.info("alpha %g: %s", alpha, report.summary())
    summary = {
        "grid": grid,
        "fr": [r["fr"] for r in rows],
        "fid": [r["fid"] for r in rows],
        "cd": [r["cd"] for r in rows],
        "runs": rows,
        "config_checksum": config.checksum(),
    }
    (sweep_dir / "config.json").write_text(config.to_json())
    (sweep_dir / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    plot_sweep(summary, sweep_dir)
    return sweep_dir, summary


def plot_sweep(summary, out_dir):
    """FR-vs-alpha and FID-vs-alpha line plots as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}
    grid = summary["grid"]
    # symlog keeps alpha = 0 on the axis
    for key, label in (("fr", "flip rate"), ("fid", "FID")):
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        ax.plot(grid, summary[key], marker="o")
        ax.set_xscale("symlog", linthresh=0.1)
        ax.set_xlabel("spurious weight")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = Path(out_dir) / f"{key}_vs_alpha.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths[key] = path
    return paths
