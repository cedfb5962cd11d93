"""Run configuration: presets, config files, overrides, hashing.

A run is described by a flat set of fields (model, truth, prior, horizon,
lookahead, draws, mode, seed, replicates, bounds, budgets).  The fields
come from a named preset and/or a YAML file, with command-line overrides
applied last.  A canonical hash of the resolved fields travels into every
output file so results from different configurations never silently mix.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .design import DesignProblem, PriorSpec
from .exceptions import ConfigError
from .models import (
    BoxConstraints,
    ModelDefinition,
    affine_model,
    builtin_msd,
    builtin_two_compartment,
)

__all__ = ["RunConfig", "preset", "load_config_file", "resolve", "PRESETS"]

MODES = ("optimal", "random", "nonadaptive")

# Fields a config file or flag may set.  "out" and "workers" control where
# and how results are produced, not what is computed, so they stay out of
# the hash.
_FIELDS = (
    "model",
    "model_options",
    "truth",
    "prior",
    "steps",
    "lookahead",
    "draws",
    "mode",
    "seed",
    "replicates",
    "bounds",
    "budgets",
    "out",
    "workers",
)
_HASHED_FIELDS = tuple(f for f in _FIELDS if f not in ("out", "workers"))


def preset(name):
    """Baseline field dict for a built-in experiment."""
    if name == "msd":
        return {
            "model": "msd",
            "model_options": {},
            "truth": [1.0, 2.0],
            "prior": {"means": [1.4, 4.0], "variances": [0.2, 2.0]},
            "steps": 100,
            "lookahead": 3,
            "draws": 100,
            "mode": "optimal",
            "seed": 0,
            "replicates": 1,
            "bounds": {"lower": [-1.0], "upper": [1.0]},
            "budgets": {"first": 120, "later": 20},
            "out": "runs/msd",
            "workers": None,
        }
    if name == "two-compartment":
        return {
            "model": "two-compartment",
            "model_options": {},
            "truth": [0.2, 0.2, 0.2],
            "prior": {
                "means": [0.22, 0.22, 0.22],
                "variances": [0.0016, 0.0016, 0.0016],
            },
            "steps": 200,
            "lookahead": 3,
            "draws": 1000,
            "mode": "optimal",
            "seed": 0,
            "replicates": 1,
            "bounds": {"lower": [0.0], "upper": [10.0]},
            "budgets": {"first": 120, "later": 20},
            "out": "runs/two-compartment",
            "workers": None,
        }
    raise ConfigError(f"unknown preset: {name!r}")


PRESETS = ("msd", "two-compartment")


def load_config_file(path):
    """Parse a YAML config file into a field dict."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return raw


def _require(fields, key):
    if fields.get(key) is None:
        raise ConfigError(f"missing required field: {key}")
    return fields[key]


def _build_model(fields) -> ModelDefinition:
    spec = _require(fields, "model")
    options = fields.get("model_options") or {}
    if not isinstance(options, dict):
        raise ConfigError("model_options must be a mapping")
    if isinstance(spec, str):
        try:
            if spec == "msd":
                return builtin_msd(**options)
            if spec == "two-compartment":
                return builtin_two_compartment(**options)
        except TypeError as exc:
            raise ConfigError(f"bad model_options for {spec!r}: {exc}") from exc
        raise ConfigError(f"unknown model: {spec!r}")
    if not isinstance(spec, dict):
        raise ConfigError("model must be a name or an inline definition")
    try:
        return affine_model(
            name=spec.get("name", "custom"),
            n_params=int(spec["n_params"]),
            n_states=int(spec["n_states"]),
            n_inputs=int(spec["n_inputs"]),
            n_outputs=int(spec["n_outputs"]),
            matrices=spec["matrices"],
        )
    except KeyError as exc:
        raise ConfigError(f"inline model is missing {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad inline model: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved, validated description of one experiment."""

    model: ModelDefinition
    truth: np.ndarray
    prior: PriorSpec
    steps: int
    lookahead: int
    draws: int
    mode: str
    seed: int
    replicates: int
    constraints: BoxConstraints
    first_budget: int
    budget: int
    out: str
    workers: int | None
    fields: dict = field(repr=False, default_factory=dict)

    def problem(self, seed=None) -> DesignProblem:
        return DesignProblem(
            horizon=self.steps,
            lookahead=self.lookahead,
            n_draws=self.draws,
            prior=self.prior,
            constraints=self.constraints,
            first_budget=self.first_budget,
            budget=self.budget,
            seed=self.seed if seed is None else seed,
        )

    def replicate(self, r) -> "RunConfig":
        """Config of replicate ``r`` as a standalone single run."""
        fields = dict(self.fields)
        fields["seed"] = self.seed + r
        fields["replicates"] = 1
        return resolve(fields)

    @property
    def config_hash(self):
        canon = {k: self.fields.get(k) for k in _HASHED_FIELDS}
        blob = json.dumps(canon, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _as_float_list(x, what):
    try:
        arr = [float(v) for v in np.atleast_1d(np.asarray(x, dtype=float))]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be a list of numbers") from exc
    return arr


def _as_int(x, what, minimum):
    try:
        v = int(x)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what} must be an integer") from exc
    if v < minimum:
        raise ConfigError(f"{what} must be at least {minimum}")
    return v


def resolve(fields) -> RunConfig:
    """Validate a field dict and construct the immutable config.

    The normalized field values (plain lists and scalars) are kept on the
    result; they are what gets hashed and what the manifest records.
    """
    fields = dict(fields)
    model = _build_model(fields)

    truth = _as_float_list(_require(fields, "truth"), "truth")
    if len(truth) != model.n_params:
        raise ConfigError(
            f"truth has {len(truth)} entries, model has {model.n_params} parameters"
        )

    prior_raw = _require(fields, "prior")
    if not isinstance(prior_raw, dict) or set(prior_raw) != {"means", "variances"}:
        raise ConfigError("prior must be a mapping with keys means and variances")
    means = _as_float_list(prior_raw["means"], "prior means")
    variances = _as_float_list(prior_raw["variances"], "prior variances")
    try:
        prior = PriorSpec(means=means, variances=variances)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if prior.n_params != model.n_params:
        raise ConfigError("prior size does not match the model parameter count")

    steps = _as_int(_require(fields, "steps"), "steps", 1)
    lookahead = _as_int(_require(fields, "lookahead"), "lookahead", 1)
    if lookahead > steps:
        raise ConfigError("lookahead cannot exceed steps")
    draws = _as_int(_require(fields, "draws"), "draws", 1)
    seed = _as_int(fields.get("seed", 0), "seed", 0)
    replicates = _as_int(fields.get("replicates", 1), "replicates", 1)

    mode = fields.get("mode", "optimal")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {', '.join(MODES)}")

    bounds = _require(fields, "bounds")
    if not isinstance(bounds, dict) or set(bounds) != {"lower", "upper"}:
        raise ConfigError("bounds must be a mapping with keys lower and upper")
    lower = _as_float_list(bounds["lower"], "lower bounds")
    upper = _as_float_list(bounds["upper"], "upper bounds")
    if len(lower) == 1 and model.n_inputs > 1:
        lower = lower * model.n_inputs
        upper = upper * model.n_inputs
    if len(lower) != model.n_inputs or len(upper) != model.n_inputs:
        raise ConfigError("bounds do not match the model input count")
    try:
        constraints = BoxConstraints(u_min=lower, u_max=upper)
    except Exception as exc:
        raise ConfigError(str(exc)) from exc

    budgets = fields.get("budgets") or {"first": 120, "later": 20}
    if not isinstance(budgets, dict) or set(budgets) - {"first", "later"}:
        raise ConfigError("budgets must be a mapping with keys first and later")
    first_budget = _as_int(budgets.get("first", 120), "first budget", 1)
    budget = _as_int(budgets.get("later", 20), "later budget", 1)

    out = fields.get("out") or "runs/out"
    workers = fields.get("workers")
    if workers is not None:
        workers = _as_int(workers, "workers", 1)

    normalized = {
        "model": fields["model"],
        "model_options": fields.get("model_options") or {},
        "truth": truth,
        "prior": {"means": means, "variances": variances},
        "steps": steps,
        "lookahead": lookahead,
        "draws": draws,
        "mode": mode,
        "seed": seed,
        "replicates": replicates,
        "bounds": {"lower": lower, "upper": upper},
        "budgets": {"first": first_budget, "later": budget},
        "out": str(out),
        "workers": workers,
    }
    return RunConfig(
        model=model,
        truth=np.asarray(truth, dtype=float),
        prior=prior,
        steps=steps,
        lookahead=lookahead,
        draws=draws,
        mode=mode,
        seed=seed,
        replicates=replicates,
        constraints=constraints,
        first_budget=first_budget,
        budget=budget,
        out=str(out),
        workers=workers,
        fields=normalized,
    )
