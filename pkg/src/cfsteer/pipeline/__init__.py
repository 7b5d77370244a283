"""Orchestration: configuration, runs, sweeps, reports, judge client and CLI."""

from .config import RunConfig
from .run import CEResult, run_experiment
from .sweep import sweep_alpha

__all__ = ["RunConfig", "CEResult", "run_experiment", "sweep_alpha"]
