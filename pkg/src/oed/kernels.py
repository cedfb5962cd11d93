"""Design-criterion evaluation backends.

One adaptive step maximizes, over the next window of controls
``z = vec(u_{k+1..k+e})``,

    C(z) = log sum_i  w_i * det(J_i + I_i(z))

across prior draws ``i``, where ``J_i`` is the draw's accumulated
observed information and ``I_i(z)`` the expected information of the
upcoming window given the draw's filtered state.

For a linear model the window output means are *affine* in ``z`` and the
window covariances do not depend on ``z`` at all.  Everything expensive
(moment propagation, covariance factorization, trace terms) therefore
happens once per adaptive step in :func:`prepare_criterion`; each
candidate evaluation only assembles small ``p x p`` matrices per draw.

Two interchangeable evaluation backends exist:

* ``numpy``  - vectorized over draws, always available,
* ``numba``  - compiled per-draw loops (module ``_kernels_numba``).

Selection: the ``OED_BACKEND`` environment variable (``numba``,
``numpy`` or ``auto``); ``auto`` (default) prefers numba when it
imports.  Backends agree to roundoff; they may differ bitwise.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, DegenerateEnsembleError, NotPositiveDefiniteError
from .fim import jitter_ladder

__all__ = [
    "ModelParts",
    "CriterionData",
    "model_parts",
    "state_parts",
    "prepare_criterion",
    "criterion_and_grad",
    "active_backend",
]

STATUS_OK = 0
STATUS_NOT_PD = 1
STATUS_DEGENERATE = 2

_TINY = np.finfo(float).tiny
# the information matrices J+I get an *uncapped* escalation: the observed
# part is legitimately indefinite at small sample counts and a candidate
# is repaired, not rejected.  700 decades span the whole float64 range.
_MAX_SHIFT_LEVELS = 700


def _repair_shift(trace, min_eig):
    """Diagonal shift making an information matrix factorizable.

    Starts at 1e-12*trace and escalates by powers of ten until the
    smallest eigenvalue clears the floor 1e-14*trace.  A matrix with
    nonpositive trace has no workable shift and comes back as nan.
    """
    trace = np.asarray(trace, dtype=float)
    min_eig = np.asarray(min_eig, dtype=float)
    floor = 1e-14 * np.maximum(trace, _TINY)
    need = min_eig <= floor
    hopeless = need & (trace <= 0.0)
    cur = np.where(need & ~hopeless, 1e-12 * trace, 0.0)
    pending = need & ~hopeless & (min_eig + cur <= floor)
    for _ in range(_MAX_SHIFT_LEVELS):
        if not pending.any():
            break
        cur = np.where(pending, cur * 10.0, cur)
        pending = pending & (min_eig + cur <= floor)
    cur[hopeless | pending] = np.nan
    return cur


def _value_part(x, lead, trail_ndim):
    v = np.asarray(ad.value_of(x), dtype=float)
    return np.ascontiguousarray(np.broadcast_to(v, lead + v.shape[v.ndim - trail_ndim:]))


def _grad_part(x, p, base_shape):
    """Gradient as ``base_shape[0] x p x trailing``, broadcasting constants."""
    if not isinstance(x, (ad.Dual, ad.HyperDual)):
        return np.zeros((base_shape[0], p) + base_shape[1:])
    g = np.asarray(x.grad, dtype=float)
    # pad the base rank (dirs axis stays leading), then broadcast
    g = g.reshape(g.shape[:1] + (1,) * (1 + len(base_shape) - g.ndim) + g.shape[1:])
    g = np.broadcast_to(g, (p,) + base_shape)
    return np.ascontiguousarray(np.moveaxis(g, 0, 1))


@dataclass
class ModelParts:
    """Per-draw model matrices and their parameter gradients.

    Values are ``(N, ...)``; gradients ``(N, p, ...)``.
    """

    F: np.ndarray
    dF: np.ndarray
    B: np.ndarray
    dB: np.ndarray
    H: np.ndarray
    dH: np.ndarray
    Q: np.ndarray
    dQ: np.ndarray
    R: np.ndarray
    dR: np.ndarray

    @property
    def n_draws(self):
        return self.F.shape[0]

    @property
    def n_params(self):
        return self.dF.shape[1]


def model_parts(model, n_draws, n_params):
    """Split a (possibly derivative-carrying) batched model into arrays."""
    lead = (n_draws,)
    out = {}
    for name in ("F", "B", "H", "Q", "R"):
        x = getattr(model, name)
        v = _value_part(x, lead, 2)
        out[name] = v
        out["d" + name] = _grad_part(x, n_params, v.shape)
    return ModelParts(**out)


def state_parts(mean, cov, n_draws, n_params):
    """Filtered state values and parameter sensitivities as plain arrays."""
    m = _value_part(mean, (n_draws,), 1)
    dm = _grad_part(mean, n_params, m.shape)
    pcov = _value_part(cov, (n_draws,), 2)
    dp = _grad_part(cov, n_params, pcov.shape)
    return m, dm, pcov, dp


@dataclass
class CriterionData:
    """Control-independent factors of one adaptive step's criterion.

    With ``z`` the flattened window controls, draw ``i`` sees window
    output-mean sensitivities ``dmu_a(z) = cth[i,a] + Lth[i,a] @ z`` and
    information matrix

        I(z)[a,b] = dmu_a(z) . Sigma^-1 dmu_b(z) + strace[i,a,b]

    where ``Wcth/WLth`` pre-apply ``Sigma^-1`` and ``strace`` holds the
    control-free covariance trace terms.  ``jmat`` is the observed
    information, ``logw`` the log-weights.
    """

    cth: np.ndarray  # (N, p, ed)
    Lth: np.ndarray  # (N, p, ed, q)
    Wcth: np.ndarray  # (N, p, ed)
    WLth: np.ndarray  # (N, p, ed, q)
    strace: np.ndarray  # (N, p, p)
    jmat: np.ndarray  # (N, p, p)
    logw: np.ndarray  # (N,)
    steps: int
    n_inputs: int

    @property
    def n_controls(self):
        return self.steps * self.n_inputs


def prepare_criterion(parts: ModelParts, mean, dmean, cov, dcov, obs_fim, logw, steps):
    """Precompute the control-independent criterion factors for one step.

    ``mean (N,n)``, ``dmean (N,p,n)``, ``cov (N,n,n)``, ``dcov (N,p,n,n)``
    describe the filtered state and its parameter sensitivities;
    ``obs_fim (N,p,p)`` the accumulated observed information.  ``steps``
    is the (already truncated) window length.
    """
    F, dF, B, dB = parts.F, parts.dF, parts.B, parts.dB
    H, dH, R, dR = parts.H, parts.dH, parts.R, parts.dR
    n_draws, n = mean.shape
    p = dmean.shape[1]
    m_in = B.shape[-1]
    d_out = H.shape[-2]
    q = steps * m_in
    ed = steps * d_out

    f = mean
    df = dmean
    g_z = np.zeros((n_draws, n, q))
    dg_z = np.zeros((n_draws, p, n, q))
    v_cov = cov
    dv_cov = dcov
    crosses = []  # per earlier step r: (X_{s,r}, dX_{s,r}) carried forward

    cth = np.empty((n_draws, p, ed))
    lth = np.empty((n_draws, p, ed, q))
    sig = np.empty((n_draws, ed, ed))
    dsig = np.empty((n_draws, p, ed, ed))

    def _sym(a):
        return 0.5 * (a + np.swapaxes(a, -1, -2))

    for s in range(steps):
        # mean pieces: x_s = f_s + G_s z, differentiated in theta
        df = np.einsum("npij,nj->npi", dF, f) + np.einsum("nij,npj->npi", F, df)
        f = np.einsum("nij,nj->ni", F, f)
        dg_z = np.einsum("npij,njq->npiq", dF, g_z) + np.einsum(
            "nij,npjq->npiq", F, dg_z
        )
        g_z = np.einsum("nij,njq->niq", F, g_z)
        g_z[..., s * m_in : (s + 1) * m_in] += B
        dg_z[..., s * m_in : (s + 1) * m_in] += dB

        # variance recursion (control-free)
        dv_new = (
            np.einsum("npij,njk,nlk->npil", dF, v_cov, F)
            + np.einsum("nij,npjk,nlk->npil", F, dv_cov, F)
            + np.einsum("nij,njk,nplk->npil", F, v_cov, dF)
            + parts.dQ
        )
        v_new = np.einsum("nij,njk,nlk->nil", F, v_cov, F) + parts.Q
        v_cov = _sym(v_new)
        dv_cov = _sym(dv_new)

        # carry forward state cross-covariances Cov(x_s, x_r), r < s
        crosses = [
            (
                np.einsum("nij,njk->nik", F, x),
                np.einsum("npij,njk->npik", dF, x)
                + np.einsum("nij,npjk->npik", F, dx),
            )
            for x, dx in crosses
        ]
        crosses.append((v_cov, dv_cov))

        rows = slice(s * d_out, (s + 1) * d_out)
        cth[:, :, rows] = np.einsum("npdi,ni->npd", dH, f) + np.einsum(
            "ndi,npi->npd", H, df
        )
        lth[:, :, rows] = np.einsum("npdi,niq->npdq", dH, g_z) + np.einsum(
            "ndi,npiq->npdq", H, dg_z
        )

        for r in range(s + 1):
            x, dx = crosses[r]
            cols = slice(r * d_out, (r + 1) * d_out)
            blk = np.einsum("nai,nij,nbj->nab", H, x, H)
            dblk = (
                np.einsum("npai,nij,nbj->npab", dH, x, H)
                + np.einsum("nai,npij,nbj->npab", H, dx, H)
                + np.einsum("nai,nij,npbj->npab", H, x, dH)
            )
            if r == s:
                blk = _sym(blk + R)
                dblk = _sym(dblk + dR)
            sig[:, rows, cols] = blk
            dsig[:, :, rows, cols] = dblk
            if r != s:
                sig[:, cols, rows] = np.swapaxes(blk, -1, -2)
                dsig[:, :, cols, rows] = np.swapaxes(dblk, -1, -2)

    lam = jitter_ladder(
        np.trace(sig, axis1=-2, axis2=-1), np.linalg.eigvalsh(sig)[..., 0]
    )
    if np.any(np.isnan(lam)):
        raise NotPositiveDefiniteError(
            "window output covariance is not positive definite after jitter"
        )
    sig_j = sig + lam[:, None, None] * np.eye(ed)

    # a single factorization serves every right-hand side
    rhs = np.concatenate(
        [
            np.moveaxis(cth, 1, 2),
            np.moveaxis(lth, 1, 2).reshape(n_draws, ed, p * q),
            np.moveaxis(dsig, 1, 2).reshape(n_draws, ed, p * ed),
        ],
        axis=-1,
    )
    sol = np.linalg.solve(sig_j, rhs)
    wcth = np.moveaxis(sol[..., :p], 2, 1)
    wlth = np.moveaxis(sol[..., p : p + p * q].reshape(n_draws, ed, p, q), 2, 1)
    tmat = np.moveaxis(sol[..., p + p * q :].reshape(n_draws, ed, p, ed), 2, 1)

    strace = 0.5 * np.einsum("npab,nqba->npq", tmat, tmat)
    strace = 0.5 * (strace + np.swapaxes(strace, -1, -2))

    jmat = np.ascontiguousarray(np.broadcast_to(obs_fim, (n_draws, p, p)), dtype=float)
    return CriterionData(
        cth=np.ascontiguousarray(cth),
        Lth=np.ascontiguousarray(lth),
        Wcth=np.ascontiguousarray(wcth),
        WLth=np.ascontiguousarray(wlth),
        strace=np.ascontiguousarray(strace),
        jmat=jmat,
        logw=np.ascontiguousarray(logw, dtype=float),
        steps=steps,
        n_inputs=m_in,
    )


def _criterion_numpy(data: CriterionData, z):
    active = data.logw > -np.inf
    v = data.cth + data.Lth @ z
    w = data.Wcth + data.WLth @ z
    m = np.einsum("npe,nqe->npq", v, w)
    a = data.jmat + data.strace + 0.5 * (m + np.swapaxes(m, -1, -2))
    # zero-weight draws contribute nothing; exempt them from the PD demand
    a[~active] = np.eye(a.shape[-1])
    lam = _repair_shift(
        np.trace(a, axis1=-2, axis2=-1), np.linalg.eigvalsh(a)[..., 0]
    )
    # a draw with no workable shift contributes determinant zero; only a
    # candidate with no surviving draw at all is an error
    dead = np.isnan(lam)
    if np.any(dead):
        a[dead] = np.eye(a.shape[-1])
        lam = np.where(dead, 0.0, lam)
        active = active & ~dead
    a_j = a + lam[:, None, None] * np.eye(a.shape[-1])
    cf = np.linalg.cholesky(a_j)
    ld = 2.0 * np.log(np.diagonal(cf, axis1=-2, axis2=-1)).sum(axis=-1)
    a_inv = np.linalg.solve(a_j, np.broadcast_to(np.eye(a.shape[-1]), a.shape))
    # d logdet / dz, with the jitter treated as locally constant
    per_draw_grad = 2.0 * np.einsum("npq,npel,nqe->nl", a_inv, data.Lth, w)

    score = np.where(active, data.logw + ld, -np.inf)
    top = score.max()
    if top == -np.inf:
        if np.all(data.logw == -np.inf):
            return -np.inf, np.zeros(data.n_controls), STATUS_DEGENERATE
        return np.nan, np.zeros(data.n_controls), STATUS_NOT_PD
    t = np.exp(score - top)
    total = t.sum()
    value = top + np.log(total)
    grad = (t / total) @ per_draw_grad
    return value, grad, STATUS_OK


def _criterion_numba(data: CriterionData, z):
    from . import _kernels_numba as nb

    grad = np.zeros(data.n_controls)
    value, status = nb.criterion_kernel(
        np.ascontiguousarray(z, dtype=float),
        data.cth,
        data.Lth,
        data.Wcth,
        data.WLth,
        data.strace,
        data.jmat,
        data.logw,
        grad,
    )
    return value, grad, status


def active_backend():
    """Resolve the evaluation backend from ``OED_BACKEND``."""
    choice = os.environ.get("OED_BACKEND", "auto").strip().lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ConfigError(f"unknown OED_BACKEND value: {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        from . import _kernels_numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise ConfigError("OED_BACKEND=numba but numba is not importable")
        return "numpy"
    return "numba"


def criterion_and_grad(data: CriterionData, z, backend=None):
    """Criterion value and gradient at flattened window controls ``z``."""
    z = np.asarray(z, dtype=float)
    if z.shape != (data.n_controls,):
        raise ValueError(
            f"expected {data.n_controls} stacked controls, got shape {z.shape}"
        )
    backend = backend or active_backend()
    if backend == "numba":
        value, grad, status = _criterion_numba(data, z)
    else:
        value, grad, status = _criterion_numpy(data, z)
    if status == STATUS_NOT_PD:
        raise NotPositiveDefiniteError(
            "no draw yields a positive definite information matrix "
            "after jitter escalation"
        )
    if status == STATUS_DEGENERATE:
        raise DegenerateEnsembleError("no prior draw carries weight")
    return value, grad
