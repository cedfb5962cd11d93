"""Execution harness: runs experiments and lays down result directories.

A single run produces six CSV logs plus ``manifest.json`` in its output
directory.  An ensemble runs ``R`` replicates with seeds ``seed + r``,
each in its own ``replicate_###`` subdirectory laid out exactly like a
standalone run with that seed, then aggregates the estimate trajectories
of the replicates that completed into ``summary.csv``.  Replicates are
independent, so they can run in worker processes; with one worker
everything stays in-process.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata

import numpy as np

from . import config as config_mod
from . import output
from .design import run_experiment
from .exceptions import OEDError
from .kernels import active_backend

__all__ = ["run_single", "run_ensemble", "effective_workers"]


def _package_version():
    try:
        return metadata.version("adaptive-oed")
    except metadata.PackageNotFoundError:
        return "unknown"


def effective_workers(cfg):
    """Worker count: config value, then OED_WORKERS, then 1."""
    if cfg.workers is not None:
        return cfg.workers
    env = os.environ.get("OED_WORKERS", "").strip()
    if env:
        try:
            w = int(env)
        except ValueError:
            raise OEDError(f"OED_WORKERS must be an integer, got {env!r}")
        if w < 1:
            raise OEDError("OED_WORKERS must be at least 1")
        return w
    return 1


def run_single(cfg, out_dir=None):
    """Execute one experiment and write its logs.

    Returns ``(log, manifest)``.  A run whose ensemble collapsed still
    writes full-length logs; the manifest carries the step index where
    adaptation stopped.
    """
    out_dir = cfg.out if out_dir is None else out_dir
    log = run_experiment(cfg.model, cfg.problem(), cfg.truth, mode=cfg.mode)
    chash = cfg.config_hash
    files = output.write_run_files(out_dir, log, chash)
    manifest = {
        "kind": "run",
        "version": _package_version(),
        "backend": active_backend(),
        "config": cfg.fields,
        "mode": log.mode,
        "steps": int(log.us.shape[0]),
        "draws": int(log.thetas.shape[0]),
        "degenerate_at": log.degenerate_at,
        "files": sorted(os.path.basename(p) for p in files.values()),
    }
    output.write_json(os.path.join(out_dir, "manifest.json"), manifest, chash)
    return log, manifest


def _replicate_task(fields, r, out_dir):
    """Run replicate ``r`` in a fresh process; returns its status row."""
    cfg = config_mod.resolve(fields).replicate(r)
    try:
        log, _ = run_single(cfg, out_dir=out_dir)
    except OEDError as exc:
        return {"replicate": r, "seed": cfg.seed, "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}, None
    status = "degenerate" if log.degenerate_at is not None else "completed"
    row = {"replicate": r, "seed": cfg.seed, "status": status,
           "degenerate_at": log.degenerate_at}
    return row, log.mles


def run_ensemble(cfg, progress=None):
    """Run all replicates and aggregate the completed ones.

    Returns the ensemble manifest.  ``progress`` is called with each
    replicate's status row as it lands.  Failed replicates are recorded
    and skipped by the summary; degenerate replicates ran to the horizon
    (with a frozen tail) and are included.
    """
    out_root = cfg.out
    workers = effective_workers(cfg)
    reps = cfg.replicates
    dirs = [os.path.join(out_root, f"replicate_{r:03d}") for r in range(reps)]

    results = [None] * reps
    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=min(workers, reps)) as pool:
            futures = [
                pool.submit(_replicate_task, cfg.fields, r, dirs[r])
                for r in range(reps)
            ]
            for r, fut in enumerate(futures):
                results[r] = fut.result()
                if progress is not None:
                    progress(results[r][0])
    else:
        for r in range(reps):
            results[r] = _replicate_task(cfg.fields, r, dirs[r])
            if progress is not None:
                progress(results[r][0])

    rows = [row for row, _ in results]
    stacks = [mles for _, mles in results if mles is not None]
    chash = cfg.config_hash
    completed = len(stacks)
    if completed:
        output.write_summary(
            os.path.join(out_root, "summary.csv"), cfg.steps, np.stack(stacks), chash
        )
    manifest = {
        "kind": "ensemble",
        "version": _package_version(),
        "backend": active_backend(),
        "config": cfg.fields,
        "replicates": reps,
        "completed": completed,
        "statuses": rows,
        "files": ["summary.csv"] if completed else [],
    }
    output.write_json(os.path.join(out_root, "manifest.json"), manifest, chash)
    return manifest
