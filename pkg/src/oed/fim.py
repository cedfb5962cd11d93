"""Fisher information for linear Gaussian state-space models.

Two complementary quantities drive the input design:

* the *expected* information of a batch of future measurements, built
  from the joint Gaussian moments of the measurement window via the
  standard multivariate-normal information formula
  ``I_ij = dmu_i' S^-1 dmu_j + 0.5 tr(S^-1 S_i S^-1 S_j)``,
* the *observed* information, the negative Hessian of the accumulated
  log-likelihood, read off a hyper-dual filter pass.

Windows may start from the prior (time zero) or be conditioned on a
filtered state whose mean and covariance carry parameter sensitivities;
both cases run through the same moment recursion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import NotPositiveDefiniteError
from .models import ModelDefinition, build_model

__all__ = [
    "JointMoments",
    "joint_moments",
    "fim_from_moments",
    "expected_fim",
    "observed_fim",
    "jitter_ladder",
]

# Jitter escalation for near-singular symmetric factorizations: start at
# 1e-12 * trace and grow tenfold up to 1e-6 * trace.
JITTER_BASE = 1e-12
JITTER_LEVELS = 7
EIG_FLOOR = 1e-14


@dataclass
class JointMoments:
    """Stacked mean ``(..., L*d)`` and covariance ``(..., L*d, L*d)``."""

    mean: object
    cov: object


def joint_moments(model, u_window, start_mean, start_cov) -> JointMoments:
    """Joint Gaussian moments of the next ``L`` measurements.

    ``u_window`` holds the controls for those steps, one row each.  The
    recursion propagates the state mean and variance and accumulates the
    between-step covariance blocks incrementally,
    ``Cov(y_r, y_s) = H F^(r-s) Var(x_s) H'`` for ``r > s``, one matrix
    product per block rather than explicit matrix powers.
    """
    if not isinstance(u_window, (ad.Dual, ad.HyperDual)):
        u_window = np.asarray(u_window, dtype=float)
    length = np.shape(ad.value_of(u_window))[0]
    excol = start_mean[..., None]
    vx = start_cov
    means = []
    diag = []
    cross = {}  # (r, s) with r > s
    propagated = []  # F^(r-s) Var(x_s), updated in place each step
    ht = ad.mT(model.H)
    ft = ad.mT(model.F)
    for r in range(length):
        ucol = ad.vindex(u_window, r)[..., None]
        excol = model.F @ excol + model.B @ ucol
        vx = ad.sym2(model.F @ vx @ ft + model.Q)
        for s in range(r):
            propagated[s] = model.F @ propagated[s]
            cross[(r, s)] = model.H @ propagated[s] @ ht
        propagated.append(vx)
        means.append((model.H @ excol)[..., 0])
        diag.append(ad.sym2(model.H @ vx @ ht + model.R))
    rows = []
    for r in range(length):
        row = []
        for s in range(length):
            if s == r:
                row.append(diag[r])
            elif s < r:
                row.append(cross[(r, s)])
            else:
                row.append(ad.mT(cross[(s, r)]))
        rows.append(ad.concat_last(row))
    return JointMoments(ad.concat_last(means), ad.concat_rows(rows))


def jitter_ladder(trace, min_eig):
    """Smallest escalation level that makes a factorization safe.

    Returns the jitter to add to the diagonal, elementwise over any batch
    shape; ``nan`` marks entries where even ``1e-6 * trace`` is not
    enough.  A matrix already comfortably positive definite gets zero.
    """
    trace = np.asarray(trace, dtype=float)
    min_eig = np.asarray(min_eig, dtype=float)
    floor = EIG_FLOOR * np.maximum(trace, np.finfo(float).tiny)
    out = np.where(min_eig > floor, 0.0, np.nan)
    need = ~(min_eig > floor)
    level = JITTER_BASE * trace
    for _ in range(JITTER_LEVELS):
        ok = need & (min_eig + level > floor)
        out = np.where(ok, level, out)
        need = need & ~ok
        level = level * 10.0
    return out


def _jittered(sigma, context):
    """Add ladder jitter to a stack of symmetric matrices or raise."""
    eigs = np.linalg.eigvalsh(sigma)
    tr = np.trace(sigma, axis1=-2, axis2=-1)
    jit = jitter_ladder(tr, eigs[..., 0])
    if np.any(np.isnan(jit)):
        raise NotPositiveDefiniteError(f"{context} is singular beyond jitter range")
    if np.any(jit > 0):
        sigma = sigma + jit[..., None, None] * np.eye(sigma.shape[-1])
    return sigma


def fim_from_moments(mean, cov):
    """Assemble the information matrix from derivative-carrying moments.

    ``mean`` must be a ``Dual`` over the parameters (its base may itself
    carry control derivatives); ``cov`` a ``Dual`` with a plain value.
    Returns a ``(..., p, p)`` matrix of the base kind, exactly symmetric
    by construction.
    """
    p = ad.ndirs(mean)
    sigma = _jittered(np.asarray(cov.value), "batch measurement covariance")
    acols = [ad.dirslice(mean, i)[..., None] for i in range(p)]
    xcols = [ad.solve(sigma, a) for a in acols]
    tmats = [np.linalg.solve(sigma, ad.dirslice(cov, i)) for i in range(p)]
    entries = [[None] * p for _ in range(p)]
    for i in range(p):
        for j in range(i, p):
            mterm = (ad.mT(acols[i]) @ xcols[j])[..., 0, 0]
            tterm = 0.5 * ad.trace(tmats[i] @ tmats[j])
            entries[i][j] = mterm + tterm
            entries[j][i] = entries[i][j]
    return ad.block_matrix(entries)


def _lift_start(defn, model, start_mean, start_cov):
    p = defn.n_params
    if start_mean is None:
        start_mean = model.m0
    if start_cov is None:
        start_cov = model.P0
    if not isinstance(start_mean, (ad.Dual, ad.HyperDual)):
        start_mean = np.asarray(start_mean, dtype=float)
        start_mean = ad.Dual(start_mean, np.zeros((p,) + start_mean.shape))
    if not isinstance(start_cov, (ad.Dual, ad.HyperDual)):
        start_cov = np.asarray(start_cov, dtype=float)
        start_cov = ad.Dual(start_cov, np.zeros((p,) + start_cov.shape))
    return ad.first_order(start_mean), ad.first_order(start_cov)


def expected_fim(
    defn: ModelDefinition, theta, u_window, start_mean=None, start_cov=None
):
    """Expected information of the measurements produced by ``u_window``.

    Without explicit start arguments the window starts from the model's
    initial state distribution.  Passing a filtered mean and covariance
    (optionally derivative-carrying) yields the conditioned variant used
    during adaptive redesign.
    """
    theta = np.asarray(theta, dtype=float)
    model = build_model(defn, ad.seed_dual(theta))
    start_mean, start_cov = _lift_start(defn, model, start_mean, start_cov)
    moments = joint_moments(model, u_window, start_mean, start_cov)
    info = fim_from_moments(moments.mean, moments.cov)
    return np.asarray(ad.value_of(info))


def observed_fim(loglik):
    """Negative Hessian of a hyper-dual log-likelihood, directions last."""
    return -ad.hess_matrix(loglik)
