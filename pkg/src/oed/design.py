"""Adaptive input design: prior ensemble, weights, optimizer, main loop.

The engine keeps ``N`` parameter draws fixed for the whole experiment
and tracks, per draw, a Kalman filter whose state carries first and
second parameter derivatives.  After each measurement the draw weights
are reweighted by the predictive density and the next window of
controls is chosen to maximize the weighted determinant criterion (see
module ``kernels``).  Estimation never uses the weights directly: the
reported estimate is the draw with the highest accumulated
log-likelihood.

Degeneracy (every draw's predictive density underflowing to ``-inf``)
does not abort a run: controls freeze at the last solution, the
remaining steps run open loop, and the log records the step at which
adaptation stopped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import autodiff as ad
from . import kernels
from .exceptions import (
    BudgetExhausted,
    DegenerateEnsembleError,
    NotPositiveDefiniteError,
    OEDError,
)
from .kalman import FilterState, loglik_increment, predict, update
from .models import BoxConstraints, ModelDefinition, build_model
from .simulate import RngSpec, psd_sqrt, simulate_step

__all__ = [
    "PriorSpec",
    "DesignProblem",
    "PriorEnsemble",
    "ExperimentLog",
    "draw_prior",
    "updated_log_weights",
    "measurement_update",
    "criterion_eval",
    "maximize_with_budget",
    "optimize_controls",
    "mle_estimate",
    "adaptive_step",
    "run_experiment",
]

# streams carved out of one seed, in the order they are consumed
PLANT_STREAM = 0
PRIOR_STREAM = 1
TAILFILL_STREAM = 2
RANDOM_CONTROL_STREAM = 3


@dataclass(frozen=True)
class PriorSpec:
    """Independent normal prior, one (mean, variance) pair per parameter."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.atleast_1d(np.asarray(self.means, float)))
        object.__setattr__(
            self, "variances", np.atleast_1d(np.asarray(self.variances, float))
        )
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must have the same shape")
        if np.any(self.variances <= 0):
            raise ValueError("prior variances must be positive")

    @property
    def n_params(self):
        return self.means.shape[0]

    def sample(self, rng, n):
        gen = rng.generator() if isinstance(rng, RngSpec) else rng
        z = gen.standard_normal((n, self.n_params))
        return self.means + np.sqrt(self.variances) * z


@dataclass(frozen=True)
class DesignProblem:
    """Experiment dimensions, prior, constraints and optimizer budgets."""

    horizon: int  # total steps T
    lookahead: int  # window length e
    n_draws: int
    prior: PriorSpec
    constraints: BoxConstraints
    first_budget: int = 120
    budget: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.horizon > 0 and not (1 <= self.lookahead <= self.horizon):
            raise ValueError("lookahead must satisfy 1 <= e <= T")
        if self.n_draws < 1:
            raise ValueError("need at least one prior draw")
        if self.first_budget < 1 or self.budget < 1:
            raise ValueError("evaluation budgets must be at least 1")


class PriorEnsemble:
    """Fixed parameter draws with per-draw filter state and information.

    ``state.mean/cov`` are batched over draws and carry first and second
    parameter derivatives; the accumulated log-likelihood does too, so
    the observed information is read off its Hessian at any time.
    """

    def __init__(self, defn: ModelDefinition, thetas, log_weights):
        self.defn = defn
        self.thetas = np.asarray(thetas, dtype=float)
        self.log_weights = np.asarray(log_weights, dtype=float)
        n, p = self.thetas.shape
        self.model = build_model(defn, ad.seed_hyperdual(self.thetas))
        m0 = np.broadcast_to(
            np.asarray(ad.value_of(self.model.m0), float), (n, defn.n_states)
        )
        p0 = np.broadcast_to(
            np.asarray(ad.value_of(self.model.P0), float),
            (n, defn.n_states, defn.n_states),
        )
        # fresh runs start with zero parameter sensitivities in the state
        self.state = FilterState(_zero_sens(m0), _zero_sens(p0), 0)
        self.loglik = _zero_sens(np.zeros(n))
        self._parts = None

    @property
    def n_draws(self):
        return self.thetas.shape[0]

    @property
    def n_params(self):
        return self.thetas.shape[1]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def loglik_values(self):
        return np.asarray(self.loglik.value)

    def observed_fims(self):
        j = -ad.hess_matrix(self.loglik)
        return np.broadcast_to(j, (self.n_draws, self.n_params, self.n_params))

    def model_parts(self):
        if self._parts is None:
            self._parts = kernels.model_parts(self.model, self.n_draws, self.n_params)
        return self._parts


def _zero_sens(value):
    value = np.asarray(value, dtype=float)
    return ad.HyperDual(
        value,
        np.zeros((1,) + value.shape),
        np.zeros((1, 1) + value.shape),
    )


def draw_prior(defn: ModelDefinition, spec: PriorSpec, n_draws, rng) -> PriorEnsemble:
    """Initialize an ensemble: equal weights, zero likelihood and state sensitivities."""
    thetas = spec.sample(rng, n_draws)
    return PriorEnsemble(defn, thetas, np.full(n_draws, -np.log(n_draws)))


def updated_log_weights(log_weights, log_density):
    """Reweight in the log domain; exact zeros stay zero.

    Raises ``DegenerateEnsembleError`` when no draw retains mass.
    """
    log_density = np.asarray(log_density, dtype=float)
    if np.any(np.isnan(log_density)):
        raise OEDError("predictive log-density is NaN")
    lw = log_weights + log_density
    norm = logsumexp(lw)
    if norm == -np.inf:
        raise DegenerateEnsembleError(
            "all prior draws lost posterior mass (predictive densities underflowed)"
        )
    return lw - norm


def measurement_update(ensemble: PriorEnsemble, u, y):
    """Advance every draw's filter by one step and reweight.

    Returns the per-draw predictive log-density values.  The ensemble's
    weights, likelihoods and filter state mutate in place.
    """
    pred = predict(ensemble.model, ensemble.state, u)
    y = np.asarray(y, dtype=float)
    state, innov = update(ensemble.model, pred, np.broadcast_to(y, (1,) + y.shape))
    inc = loglik_increment(innov)
    ensemble.state = state
    ensemble.loglik = ensemble.loglik + inc
    dens = np.asarray(ad.value_of(inc))
    dens = np.broadcast_to(dens, (ensemble.n_draws,))
    ensemble.log_weights = updated_log_weights(ensemble.log_weights, dens)
    return dens


def _prepare(ensemble: PriorEnsemble, steps):
    mean, dmean, cov, dcov = kernels.state_parts(
        ensemble.state.mean, ensemble.state.cov, ensemble.n_draws, ensemble.n_params
    )
    return kernels.prepare_criterion(
        ensemble.model_parts(),
        mean,
        dmean,
        cov,
        dcov,
        ensemble.observed_fims(),
        ensemble.log_weights,
        steps,
    )


def criterion_eval(ensemble: PriorEnsemble, u_window, constraints=None):
    """Criterion value for a candidate window ``(e, m)``, clamped to the box."""
    u_window = np.atleast_2d(np.asarray(u_window, dtype=float))
    if constraints is not None:
        u_window = constraints.clip(u_window)
    data = _prepare(ensemble, u_window.shape[0])
    value, _ = kernels.criterion_and_grad(data, u_window.ravel())
    return value


def maximize_with_budget(fun_and_grad, x0, lower, upper, budget):
    """Box-constrained ascent returning the best *evaluated* point.

    ``fun_and_grad(x) -> (value, gradient)`` is called at most ``budget``
    times (the first call is at ``x0``, so the result is never worse
    than the start).  When no evaluation is finite the start itself
    comes back with value ``-inf``.  Deterministic; no internal
    randomness.
    """
    x0 = np.asarray(x0, dtype=float)
    best_x = None
    best_val = -np.inf
    used = 0

    def negated(x):
        nonlocal best_x, best_val, used
        if used >= budget:
            raise BudgetExhausted
        used += 1
        val, grad = fun_and_grad(np.asarray(x))
        if val > best_val:
            best_val = val
            best_x = np.array(x, dtype=float)
        return -val, -np.asarray(grad)

    try:
        minimize(
            negated,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lower, upper)),
            # the evaluation budget is the termination rule; the default
            # relative tolerances would stop early on flat stretches
            options={"maxfun": budget, "maxiter": budget, "ftol": 0.0, "gtol": 0.0},
        )
    except BudgetExhausted:
        pass
    if best_x is None:
        best_x = x0
    return np.clip(best_x, lower, upper), best_val, used


def optimize_controls(ensemble: PriorEnsemble, hot_start, problem: DesignProblem, budget=None):
    """Maximize the window criterion from ``hot_start`` (shape ``(h, m)``)."""
    hot_start = np.atleast_2d(np.asarray(hot_start, dtype=float))
    steps, m_in = hot_start.shape
    data = _prepare(ensemble, steps)
    box = problem.constraints
    lower = np.tile(box.u_min, steps)
    upper = np.tile(box.u_max, steps)
    budget = problem.budget if budget is None else budget

    def objective(zz):
        try:
            return kernels.criterion_and_grad(data, zz)
        except NotPositiveDefiniteError:
            # candidate with no surviving draw; keep searching from the
            # incumbent instead of aborting the step
            return -np.inf, np.zeros_like(zz)

    z, val, used = maximize_with_budget(
        objective, hot_start.ravel(), lower, upper, budget
    )
    return z.reshape(steps, m_in), {"criterion": val, "n_evals": used}


def mle_estimate(ensemble: PriorEnsemble):
    """Parameter draw with the highest accumulated log-likelihood.

    Ties break toward the lowest draw index.
    """
    values = ensemble.loglik_values
    if np.all(values == -np.inf):
        raise DegenerateEnsembleError("every draw has zero likelihood")
    return ensemble.thetas[int(np.argmax(values))]


def _hot_start(previous, steps, n_inputs, box, gen):
    """Shift the last solution one step; fill freed slots uniformly."""
    fresh = gen.uniform(box.u_min, box.u_max, size=(steps, n_inputs))
    if previous is None:
        return fresh
    kept = previous[1:][:steps]
    if len(kept) < steps:
        kept = np.vstack([kept, fresh[len(kept):]])
    return kept


def adaptive_step(ensemble, problem: DesignProblem, k, previous_window, tail_gen):
    """Plan controls for steps ``k+1 .. k+h`` (``h = min(e, T-k)``)."""
    steps = min(problem.lookahead, problem.horizon - k)
    start = _hot_start(
        previous_window, steps, problem.constraints.u_min.shape[0],
        problem.constraints, tail_gen,
    )
    budget = problem.first_budget if k == 0 else problem.budget
    return optimize_controls(ensemble, start, problem, budget=budget)


@dataclass
class ExperimentLog:
    """Everything a closed-loop run produces, in step order."""

    mode: str
    us: np.ndarray  # (T, m)
    ys: np.ndarray  # (T, d)
    mles: np.ndarray  # (T, p)
    weights: np.ndarray  # (T, N)
    criteria: np.ndarray  # (T,), nan where no optimization happened
    thetas: np.ndarray  # (N, p)
    loglik_final: np.ndarray  # (N,)
    degenerate_at: int | None = None
    meta: dict = field(default_factory=dict)


def run_experiment(defn: ModelDefinition, problem: DesignProblem, truth, mode="optimal"):
    """Closed loop: plan (per mode), apply to the plant, measure, update.

    Modes: ``optimal`` re-plans every step; ``random`` draws i.i.d.
    uniform controls; ``nonadaptive`` plans all ``T`` controls before the
    first measurement and never re-plans.  All modes filter and reweight
    identically, so their logs are directly comparable.
    """
    if mode not in ("optimal", "random", "nonadaptive"):
        raise ValueError(f"unknown mode: {mode!r}")
    seed = problem.seed
    plant_gen = RngSpec(seed, PLANT_STREAM).generator()
    prior_gen = RngSpec(seed, PRIOR_STREAM).generator()
    tail_gen = RngSpec(seed, TAILFILL_STREAM).generator()
    control_gen = RngSpec(seed, RANDOM_CONTROL_STREAM).generator()

    ensemble = draw_prior(defn, problem.prior, problem.n_draws, prior_gen)
    truth = np.asarray(truth, dtype=float)
    plant = build_model(defn, truth)

    t_steps = problem.horizon
    n, p = ensemble.n_draws, ensemble.n_params
    m_in, d_out = defn.n_inputs, defn.n_outputs
    us = np.zeros((t_steps, m_in))
    ys = np.zeros((t_steps, d_out))
    mles = np.zeros((t_steps, p))
    weights = np.zeros((t_steps, n))
    criteria = np.full(t_steps, np.nan)
    degenerate_at = None

    x = np.asarray(ad.value_of(plant.m0), float) + plant_gen.standard_normal(
        defn.n_states
    ) @ psd_sqrt(ad.value_of(plant.P0)).T

    window = None
    plan = None  # nonadaptive: full (T, m) schedule
    frozen = None  # degenerate: remaining scheduled controls
    box = problem.constraints

    for k in range(t_steps):
        if degenerate_at is not None:
            if len(frozen) > 0:
                u, frozen = frozen[0], frozen[1:]
            else:
                u = us[k - 1]  # hold the last applied control
        elif mode == "random":
            u = control_gen.uniform(box.u_min, box.u_max, size=m_in)
        elif mode == "nonadaptive":
            if k == 0:
                full = DesignProblem(
                    horizon=t_steps,
                    lookahead=t_steps,
                    n_draws=problem.n_draws,
                    prior=problem.prior,
                    constraints=box,
                    first_budget=problem.first_budget,
                    budget=problem.budget,
                    seed=problem.seed,
                )
                plan, info = adaptive_step(ensemble, full, 0, None, tail_gen)
                criteria[0] = info["criterion"]
            u = plan[k]
        else:
            window, info = adaptive_step(ensemble, problem, k, window, tail_gen)
            criteria[k] = info["criterion"]
            u = window[0]

        x, y = simulate_step(plant, x, u, plant_gen)
        us[k] = u
        ys[k] = y

        if degenerate_at is None:
            try:
                measurement_update(ensemble, u, y)
            except DegenerateEnsembleError:
                degenerate_at = k
                frozen = window[1:] if (mode == "optimal" and window is not None) else (
                    plan[k + 1 :] if mode == "nonadaptive" else np.zeros((0, m_in))
                )
                if k > 0:
                    mles[k] = mles[k - 1]
                    weights[k] = weights[k - 1]
                continue
            mles[k] = mle_estimate(ensemble)
            weights[k] = ensemble.weights
        else:
            mles[k] = mles[k - 1]
            weights[k] = weights[k - 1]

    return ExperimentLog(
        mode=mode,
        us=us,
        ys=ys,
        mles=mles,
        weights=weights,
        criteria=criteria,
        thetas=ensemble.thetas.copy(),
        loglik_final=ensemble.loglik_values.copy(),
        degenerate_at=degenerate_at,
        meta={"seed": seed, "ensemble": ensemble},
    )
