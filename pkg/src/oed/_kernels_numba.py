"""Compiled per-draw criterion kernel.

Mirrors ``kernels._criterion_numpy`` exactly: same jitter ladder
constants, same symmetrization, same log-sum-exp reduction in fixed
draw order.  Keep the two in lockstep when editing either.
"""
import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_NOT_PD = 1
STATUS_DEGENERATE = 2

_JITTER_BASE = 1e-12
_EIG_FLOOR = 1e-14
_TINY = float(np.finfo(np.float64).tiny)
# uncapped escalation for information matrices; see kernels._repair_shift
_MAX_SHIFT_LEVELS = 700


@njit(cache=True)
def _ladder(tr, min_eig):
    floor = _EIG_FLOOR * max(tr, _TINY)
    if min_eig > floor:
        return 0.0
    if tr <= 0.0:
        return np.nan
    level = _JITTER_BASE * tr
    for _ in range(_MAX_SHIFT_LEVELS):
        if min_eig + level > floor:
            return level
        level = level * 10.0
    return np.nan


@njit(cache=True)
def criterion_kernel(z, cth, lth, wcth, wlth, strace, jmat, logw, grad_out):
    n_draws, p, ed = cth.shape
    q = z.shape[0]
    ld = np.empty(n_draws)
    gd = np.zeros((n_draws, q))
    v = np.empty((p, ed))
    w = np.empty((p, ed))
    a = np.empty((p, p))
    t = np.empty((p, ed))

    for i in range(n_draws):
        if logw[i] == -np.inf:
            ld[i] = -np.inf
            continue
        for b in range(p):
            for e in range(ed):
                acc_v = cth[i, b, e]
                acc_w = wcth[i, b, e]
                for l in range(q):
                    acc_v += lth[i, b, e, l] * z[l]
                    acc_w += wlth[i, b, e, l] * z[l]
                v[b, e] = acc_v
                w[b, e] = acc_w
        for b in range(p):
            for c in range(p):
                m_bc = 0.0
                m_cb = 0.0
                for e in range(ed):
                    m_bc += v[b, e] * w[c, e]
                    m_cb += v[c, e] * w[b, e]
                a[b, c] = jmat[i, b, c] + strace[i, b, c] + 0.5 * (m_bc + m_cb)
        tr = 0.0
        for b in range(p):
            tr += a[b, b]
        eigs = np.linalg.eigvalsh(a)
        lam = _ladder(tr, eigs[0])
        if np.isnan(lam):
            # unrepairable draw: determinant zero, no gradient contribution
            ld[i] = -np.inf
            continue
        for b in range(p):
            a[b, b] += lam
        cf = np.linalg.cholesky(a)
        acc = 0.0
        for b in range(p):
            acc += np.log(cf[b, b])
        ld[i] = 2.0 * acc
        a_inv = np.linalg.inv(a)
        for b in range(p):
            for e in range(ed):
                acc = 0.0
                for c in range(p):
                    acc += a_inv[b, c] * w[c, e]
                t[b, e] = acc
        for l in range(q):
            acc = 0.0
            for b in range(p):
                for e in range(ed):
                    acc += lth[i, b, e, l] * t[b, e]
            gd[i, l] = 2.0 * acc

    top = -np.inf
    any_weight = False
    for i in range(n_draws):
        if logw[i] > -np.inf:
            any_weight = True
        score = logw[i] + ld[i]
        if score > top:
            top = score
    if top == -np.inf:
        if any_weight:
            return np.nan, STATUS_NOT_PD
        return -np.inf, STATUS_DEGENERATE
    total = 0.0
    for i in range(n_draws):
        score = logw[i] + ld[i]
        if score == -np.inf:
            continue
        ti = np.exp(score - top)
        total += ti
        for l in range(q):
            grad_out[l] += ti * gd[i, l]
    for l in range(q):
        grad_out[l] /= total
    return top + np.log(total), STATUS_OK
