"""Kalman filtering with explicit parameter dependence.

All steps are written over the generic scalar kinds from
:mod:`oed.autodiff`; running the filter on a model built from a seeded
``HyperDual`` parameter vector therefore accumulates the gradient and
Hessian of the log-likelihood alongside its value.

The covariance update uses the plain form ``P = P_pred - K S K^T``
followed by exact symmetrization (no Joseph form); the prediction uses
the previous filtered covariance, ``P_pred = F P F^T + Q``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import NotPositiveDefiniteError

__all__ = [
    "FilterState",
    "PredictedState",
    "InnovationRecord",
    "predict",
    "update",
    "loglik_increment",
    "run_filter",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class FilterState:
    """Filtered mean ``(..., n)`` and covariance ``(..., n, n)`` at ``step``."""

    mean: object
    cov: object
    step: int = 0


@dataclass
class PredictedState:
    mean: object
    cov: object
    step: int


@dataclass
class InnovationRecord:
    """Innovation ``v``, its covariance ``S`` and the gain ``K``."""

    v: object
    S: object
    K: object


def predict(model, state: FilterState, u) -> PredictedState:
    """One-step-ahead prediction under control ``u`` (shape ``(m,)``)."""
    u = np.asarray(u, dtype=float)
    mcol = state.mean[..., None]
    m_pred = (model.F @ mcol + model.B @ u[..., None])[..., 0]
    p_pred = ad.sym2(model.F @ state.cov @ ad.mT(model.F) + model.Q)
    return PredictedState(m_pred, p_pred, state.step + 1)


def _require_pd(s):
    value = np.asarray(ad.value_of(s))
    try:
        np.linalg.cholesky(value)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError(
            "innovation covariance is not positive definite"
        ) from err


def update(model, pred: PredictedState, y):
    """Measurement update; returns the new state and the innovation record."""
    y = np.asarray(y, dtype=float)
    mcol = pred.mean[..., None]
    v = y[..., None] - model.H @ mcol
    hp = model.H @ pred.cov
    s = ad.sym2(hp @ ad.mT(model.H) + model.R)
    _require_pd(s)
    # K = P H^T S^-1 = (S^-1 H P)^T since S and P are symmetric
    gain = ad.mT(ad.solve(s, hp))
    mean = (mcol + gain @ v)[..., 0]
    cov = ad.sym2(pred.cov - gain @ s @ ad.mT(gain))
    state = FilterState(mean, cov, pred.step)
    return state, InnovationRecord(v, s, gain)


def loglik_increment(innov: InnovationRecord):
    """Gaussian log-density of one innovation: scalar-kind result."""
    d = np.shape(ad.value_of(innov.v))[-2]
    quad = (ad.mT(innov.v) @ ad.solve(innov.S, innov.v))[..., 0, 0]
    return -0.5 * (d * LOG_2PI + ad.logdet_pd(innov.S)) - 0.5 * quad


def run_filter(model, us, ys):
    """Fold the filter over aligned controls ``us (T,m)`` and data ``ys (T,d)``.

    Returns ``(state, loglik, innovations)``.  The log-likelihood is the
    sum of the per-step innovation densities and carries whatever
    derivative payload the model matrices do.
    """
    us = np.asarray(us, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(us) != len(ys):
        raise ValueError("controls and measurements must have equal length")
    mean0 = model.m0
    cov0 = model.P0
    state = FilterState(mean0, cov0, 0)
    loglik = 0.0
    innovations = []
    for u, y in zip(us, ys):
        pred = predict(model, state, u)
        state, innov = update(model, pred, y)
        loglik = loglik + loglik_increment(innov)
        innovations.append(innov)
    return state, loglik, innovations
