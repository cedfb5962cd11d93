"""Ground-truth trajectory simulation.

Noise is drawn through a PSD square root obtained from an eigenvalue
decomposition with negative eigenvalues clamped to zero, so exactly
singular covariances (pure column-space noise) are handled without
regularization.  Streams are addressed as ``(seed, stream)`` pairs fed
to ``numpy.random.default_rng``; independent replicates use distinct
streams.  The generator identity (PCG64) is part of the reproducibility
contract on a given platform; bitwise identity across numpy builds is
not promised.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

__all__ = ["RngSpec", "TrajectoryRecord", "psd_sqrt", "simulate_step", "simulate_truth"]


@dataclass(frozen=True)
class RngSpec:
    """Addressable random stream: ``(seed, stream)``."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        if self.seed < 0 or self.stream < 0:
            raise ValueError("seed and stream must be non-negative")
        return np.random.default_rng([self.seed, self.stream])


@dataclass
class TrajectoryRecord:
    """Simulated truth: states ``(..., T+1, n)`` and outputs ``(..., T, d)``."""

    us: np.ndarray
    xs: np.ndarray
    ys: np.ndarray


def psd_sqrt(a):
    """Symmetric square root of a PSD matrix, clamping negative eigenvalues."""
    a = np.asarray(a, dtype=float)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    w = np.maximum(w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def _as_generator(rng):
    if isinstance(rng, RngSpec):
        return rng.generator()
    return rng


def simulate_step(model, x, u, rng):
    """Advance the truth one step; returns ``(x_next, y)``.

    Draw order is fixed: process noise first, then measurement noise.
    """
    rng = _as_generator(rng)
    f = np.asarray(ad.value_of(model.F))
    b = np.asarray(ad.value_of(model.B))
    h = np.asarray(ad.value_of(model.H))
    sq = psd_sqrt(ad.value_of(model.Q))
    sr = psd_sqrt(ad.value_of(model.R))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = rng.standard_normal(x.shape) @ sq.T
    x_next = x @ f.T + u @ b.T + w
    v = rng.standard_normal(x.shape[:-1] + (h.shape[0],)) @ sr.T
    y = x_next @ h.T + v
    return x_next, y


def simulate_truth(model, us, rng, replicates=None):
    """Simulate a full trajectory under the control sequence ``us (T, m)``.

    With ``replicates=R`` a leading axis of independent trajectories is
    produced from the single stream, drawn step by step so that a prefix
    of steps is unaffected by the horizon length.
    """
    rng = _as_generator(rng)
    us = np.asarray(us, dtype=float)
    m0 = np.asarray(ad.value_of(model.m0), dtype=float)
    sp = psd_sqrt(ad.value_of(model.P0))
    shape = () if replicates is None else (replicates,)
    x = m0 + rng.standard_normal(shape + m0.shape) @ sp.T
    xs = [x]
    ys = []
    for u in us:
        x, y = simulate_step(model, x, u, rng)
        xs.append(x)
        ys.append(y)
    xs = np.stack(xs, axis=-2)
    ys = (
        np.stack(ys, axis=-2)
        if ys
        else np.zeros(shape + (0, np.shape(ad.value_of(model.H))[-2]))
    )
    return TrajectoryRecord(us=us, xs=xs, ys=ys)
