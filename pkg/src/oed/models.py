"""Model definitions for linear Gaussian state-space systems.

A model at a fixed parameter value collects the matrices of

    x_k = F x_{k-1} + B u_k + w_k,   w_k ~ N(0, Q)
    y_k = H x_k + v_k,               v_k ~ N(0, R)
    x_0 ~ N(m0, P0)

Builders are written once over a generic scalar kind: called with a plain
parameter vector they return plain matrices, called with a seeded
``Dual``/``HyperDual`` vector the matrices carry derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .exceptions import ModelValidationError

__all__ = [
    "BoxConstraints",
    "ModelAtTheta",
    "ModelDefinition",
    "build_model",
    "builtin_msd",
    "builtin_two_compartment",
    "affine_model",
]

PSD_EIG_TOL = 1e-10


@dataclass(frozen=True)
class BoxConstraints:
    """Per-component bounds on the control vector."""

    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u_min", np.atleast_1d(np.asarray(self.u_min, float)))
        object.__setattr__(self, "u_max", np.atleast_1d(np.asarray(self.u_max, float)))
        if self.u_min.shape != self.u_max.shape:
            raise ModelValidationError("u_min and u_max must have the same shape")
        if np.any(self.u_min > self.u_max):
            raise ModelValidationError("u_min must be <= u_max componentwise")

    def clip(self, u):
        return np.clip(u, self.u_min, self.u_max)


@dataclass
class ModelAtTheta:
    """System matrices at one parameter value; treat as immutable."""

    F: object
    B: object
    H: object
    Q: object
    R: object
    m0: object
    P0: object

    @property
    def nx(self):
        return np.shape(ad.value_of(self.F))[-1]

    @property
    def nu(self):
        return np.shape(ad.value_of(self.B))[-1]

    @property
    def ny(self):
        return np.shape(ad.value_of(self.H))[-2]


@dataclass(frozen=True)
class ModelDefinition:
    """Dimensions plus a generic builder ``theta -> ModelAtTheta``."""

    name: str
    n_params: int
    n_states: int
    n_inputs: int
    n_outputs: int
    builder: Callable[[object], ModelAtTheta]
    meta: dict = field(default_factory=dict)


def _check_psd(name, mat, strict=False):
    value = np.asarray(ad.value_of(mat), dtype=float)
    flat = value.reshape((-1,) + value.shape[-2:])
    sym = 0.5 * (flat + np.swapaxes(flat, -1, -2))
    if not np.allclose(flat, sym, rtol=0, atol=1e-8 * max(1.0, np.abs(flat).max())):
        raise ModelValidationError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(sym)
    tr = np.trace(sym, axis1=-2, axis2=-1)
    if strict:
        if np.any(eigs[..., 0] <= 0):
            raise ModelValidationError(f"{name} must be positive definite")
    else:
        tol = PSD_EIG_TOL * np.maximum(1.0, tr)
        if np.any(eigs[..., 0] < -tol):
            raise ModelValidationError(f"{name} must be positive semidefinite")


def build_model(defn: ModelDefinition, theta) -> ModelAtTheta:
    """Evaluate the builder and validate shapes and definiteness.

    ``theta`` may be a plain array ``(..., p)`` or a seeded dual vector;
    validation always looks at the value part only.
    """
    pshape = np.shape(ad.value_of(theta))
    if pshape[-1] != defn.n_params:
        raise ModelValidationError(
            f"expected {defn.n_params} parameters, got {pshape[-1]}"
        )
    model = defn.builder(theta)
    n, m, d = defn.n_states, defn.n_inputs, defn.n_outputs
    expect = {
        "F": (n, n),
        "B": (n, m),
        "H": (d, n),
        "Q": (n, n),
        "R": (d, d),
        "P0": (n, n),
    }
    for attr, shp in expect.items():
        got = np.shape(ad.value_of(getattr(model, attr)))[-2:]
        if got != shp:
            raise ModelValidationError(f"{attr} has shape {got}, expected {shp}")
    if np.shape(ad.value_of(model.m0))[-1] != n:
        raise ModelValidationError("m0 has the wrong length")
    _check_psd("Q", model.Q)
    _check_psd("P0", model.P0)
    _check_psd("R", model.R, strict=True)
    return model


def builtin_msd(dt=0.1, q=0.05, mass=1.0, meas_var=0.1) -> ModelDefinition:
    """Mass-spring-damper with position measurements.

    Parameters are the spring constant and the damping coefficient; the
    force on the mass is the single control input.
    """

    B = np.array([[0.0], [dt / mass]])
    H = np.array([[1.0, 0.0]])
    Q = (q / mass**2) * np.array(
        [[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]]
    )
    R = np.array([[meas_var]])
    m0 = np.zeros(2)
    P0 = np.diag([0.1, 0.1])

    def build(theta):
        k = theta[..., 0]
        c = theta[..., 1]
        F = ad.block_matrix(
            [
                [1.0, dt],
                [-(dt / mass) * k, 1.0 - (dt / mass) * c],
            ]
        )
        return ModelAtTheta(F=F, B=B, H=H, Q=Q, R=R, m0=m0, P0=P0)

    return ModelDefinition(
        name="msd",
        n_params=2,
        n_states=2,
        n_inputs=1,
        n_outputs=1,
        builder=build,
        meta={"dt": dt, "q": q, "mass": mass, "meas_var": meas_var},
    )


def builtin_two_compartment(dt=0.1, q=0.00625, meas_var=1e-4) -> ModelDefinition:
    """Two-compartment exchange model, dosing into the first compartment.

    Parameters are the transfer rates (k12, k21) and the elimination rate
    k10; the measurement picks up the first state scaled by dt * k10.
    ``meas_var`` is exposed so a noisier variant (e.g. 6.25e-4) can be
    selected from configuration.
    """

    B = np.array([[dt], [dt**2 / 2.0]])
    Q = q * np.array([[dt, dt**2 / 2.0], [dt**2 / 2.0, dt**3 / 3.0]])
    R = np.array([[meas_var]])
    m0 = np.array([10.0, 1.0])
    P0 = np.diag([0.01, 1e-5])

    def build(theta):
        k12 = theta[..., 0]
        k21 = theta[..., 1]
        k10 = theta[..., 2]
        F = ad.block_matrix(
            [
                [1.0 - dt * (k10 + k12), dt * k21],
                [dt * k12, 1.0 - dt * k21],
            ]
        )
        H = ad.block_matrix([[dt * k10, 0.0]])
        return ModelAtTheta(F=F, B=B, H=H, Q=Q, R=R, m0=m0, P0=P0)

    return ModelDefinition(
        name="two-compartment",
        n_params=3,
        n_states=2,
        n_inputs=1,
        n_outputs=1,
        builder=build,
        meta={"dt": dt, "q": q, "meas_var": meas_var},
    )


def _affine_entry(spec):
    """Normalize one matrix entry: number, or {const: c, coeffs: [...]}."""
    if isinstance(spec, dict):
        const = float(spec.get("const", 0.0))
        coeffs = [float(c) for c in spec.get("coeffs", [])]
        return const, coeffs
    return float(spec), []


def affine_model(
    name, n_params, n_states, n_inputs, n_outputs, matrices
) -> ModelDefinition:
    """Build a definition whose matrix entries are affine in theta.

    ``matrices`` maps each of F, B, H, Q, R, m0, P0 to a nested list of
    entries; an entry is a plain number or ``{const: c, coeffs: [a_j]}``
    meaning ``c + sum_j a_j * theta_j``.  ``m0`` is a flat list.
    """
    parsed = {}
    for key in ("F", "B", "H", "Q", "R", "P0"):
        rows = matrices[key]
        parsed[key] = [[_affine_entry(e) for e in row] for row in rows]
    parsed["m0"] = [_affine_entry(e) for e in matrices["m0"]]

    def entry_value(const, coeffs, theta):
        acc = const
        for j, a in enumerate(coeffs):
            if a != 0.0:
                acc = acc + a * theta[..., j]
        return acc

    def build(theta):
        built = {}
        for key in ("F", "B", "H", "Q", "R", "P0"):
            rows = [
                [entry_value(c, a, theta) for (c, a) in row] for row in parsed[key]
            ]
            built[key] = ad.block_matrix(rows)
        m0 = ad.stack_last([entry_value(c, a, theta) for (c, a) in parsed["m0"]])
        return ModelAtTheta(m0=m0, **built)

    return ModelDefinition(
        name=name,
        n_params=n_params,
        n_states=n_states,
        n_inputs=n_inputs,
        n_outputs=n_outputs,
        builder=build,
    )
