"""Command-line entry points.

Exit codes: 0 success, 2 configuration problems, 3 numerical failure,
4 a run whose prior ensemble collapsed (its logs are still written and
the manifest records where adaptation stopped).
"""
from __future__ import annotations

import sys

import click

from . import config as config_mod
from . import harness
from .exceptions import ConfigError, DegenerateEnsembleError, OEDError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DEGENERATE = 4


def _fail(exc):
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, ConfigError):
        sys.exit(EXIT_CONFIG)
    if isinstance(exc, DegenerateEnsembleError):
        sys.exit(EXIT_DEGENERATE)
    sys.exit(EXIT_NUMERICAL)


def _gather_fields(preset_name, config_path, overrides):
    fields = {}
    if preset_name:
        fields.update(config_mod.preset(preset_name))
    if config_path:
        fields.update(config_mod.load_config_file(config_path))
    if not fields:
        raise ConfigError("nothing to run: pass --preset and/or --config")
    for key, value in overrides.items():
        if value is not None:
            fields[key] = value
    return fields


def _common_options(fn):
    opts = [
        click.option(
            "--preset",
            "preset_name",
            type=click.Choice(config_mod.PRESETS),
            default=None,
            help="Start from a built-in experiment.",
        ),
        click.option(
            "--config",
            "config_path",
            type=click.Path(),
            default=None,
            help="YAML file; overrides the preset field by field.",
        ),
        click.option("--steps", type=int, default=None, help="Experiment length T."),
        click.option(
            "--horizon",
            "lookahead",
            type=int,
            default=None,
            help="Planning window length e.",
        ),
        click.option("--draws", type=int, default=None, help="Prior sample size N."),
        click.option("--seed", type=int, default=None, help="Base random seed."),
        click.option(
            "--out", type=click.Path(), default=None, help="Output directory."
        ),
        click.option(
            "--workers",
            type=int,
            default=None,
            help="Replicate worker processes (or set OED_WORKERS).",
        ),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Adaptive input design for linear Gaussian state-space models."""


def _single_run(overrides, preset_name, config_path):
    try:
        fields = _gather_fields(preset_name, config_path, overrides)
        fields["replicates"] = 1
        cfg = config_mod.resolve(fields)
        log, _ = harness.run_single(cfg)
    except OEDError as exc:
        _fail(exc)
    click.echo(
        f"run complete: {cfg.steps} steps, mode {cfg.mode}, outputs in {cfg.out}"
    )
    if log.degenerate_at is not None:
        click.echo(
            f"prior ensemble collapsed at step {log.degenerate_at + 1}; "
            "later controls were frozen (see manifest.json)",
            err=True,
        )
        sys.exit(EXIT_DEGENERATE)


@main.command()
@_common_options
@click.option(
    "--mode",
    type=click.Choice(config_mod.MODES),
    default=None,
    help="Control strategy.",
)
def run(preset_name, config_path, mode, **overrides):
    """Run a single experiment."""
    overrides["mode"] = mode
    _single_run(overrides, preset_name, config_path)


@main.command()
@_common_options
@click.option(
    "--mode",
    type=click.Choice(config_mod.MODES),
    default=None,
    help="Control strategy.",
)
@click.option(
    "--replicates", type=int, default=None, help="Number of replicate runs."
)
def ensemble(preset_name, config_path, mode, replicates, **overrides):
    """Run replicates with seeds seed, seed+1, ... and summarize them."""
    overrides["mode"] = mode
    overrides["replicates"] = replicates

    def progress(row):
        note = row["status"]
        if row["status"] == "failed":
            note = f"failed ({row['error']})"
        elif row["status"] == "degenerate":
            note = f"degenerate at step {row['degenerate_at'] + 1}"
        click.echo(f"replicate {row['replicate']} (seed {row['seed']}): {note}",
                   err=True)

    try:
        fields = _gather_fields(preset_name, config_path, overrides)
        cfg = config_mod.resolve(fields)
        manifest = harness.run_ensemble(cfg, progress=progress)
    except OEDError as exc:
        _fail(exc)
    completed = manifest["completed"]
    click.echo(
        f"ensemble complete: {completed}/{cfg.replicates} replicates, "
        f"outputs in {cfg.out}"
    )
    if completed == 0:
        click.echo("error: every replicate failed", err=True)
        sys.exit(EXIT_NUMERICAL)
    if any(row["status"] == "degenerate" for row in manifest["statuses"]):
        sys.exit(EXIT_DEGENERATE)


@main.command()
@_common_options
def nonadaptive(preset_name, config_path, **overrides):
    """Plan the whole input schedule before the first measurement."""
    click.echo(
        "nonadaptive mode optimizes all T controls at once; "
        "runtime grows quickly with --steps",
        err=True,
    )
    overrides["mode"] = "nonadaptive"
    _single_run(overrides, preset_name, config_path)


if __name__ == "__main__":
    main()
