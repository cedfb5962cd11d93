"""Adaptive D-optimal input design for linear Gaussian state-space models."""

from .autodiff import Dual, HyperDual, seed_dual, seed_hyperdual
from .config import RunConfig, load_config_file, preset, resolve
from .design import (
    DesignProblem,
    ExperimentLog,
    PriorSpec,
    criterion_eval,
    draw_prior,
    measurement_update,
    mle_estimate,
    optimize_controls,
    run_experiment,
)
from .exceptions import (
    ConfigError,
    DegenerateEnsembleError,
    ModelValidationError,
    NotPositiveDefiniteError,
    OEDError,
)
from .fim import expected_fim, observed_fim
from .harness import run_ensemble, run_single
from .kalman import run_filter
from .models import (
    BoxConstraints,
    ModelDefinition,
    affine_model,
    builtin_msd,
    builtin_two_compartment,
)
from .simulate import RngSpec, simulate_truth

__version__ = "0.1.0"

__all__ = [
    "Dual",
    "HyperDual",
    "seed_dual",
    "seed_hyperdual",
    "RunConfig",
    "load_config_file",
    "preset",
    "resolve",
    "DesignProblem",
    "ExperimentLog",
    "PriorSpec",
    "criterion_eval",
    "draw_prior",
    "measurement_update",
    "mle_estimate",
    "optimize_controls",
    "run_experiment",
    "ConfigError",
    "DegenerateEnsembleError",
    "ModelValidationError",
    "NotPositiveDefiniteError",
    "OEDError",
    "expected_fim",
    "observed_fim",
    "run_filter",
    "BoxConstraints",
    "ModelDefinition",
    "affine_model",
    "builtin_msd",
    "builtin_two_compartment",
    "RngSpec",
    "simulate_truth",
    "run_ensemble",
    "run_single",
    "__version__",
]
