"""Forward-mode automatic differentiation over numpy arrays.

``Dual`` carries first derivatives along ``q`` directions, ``HyperDual``
additionally carries the symmetric ``q x q`` second-derivative block.
Derivative data lives in extra *leading* axes of each field:

    Dual:      value (*S,)    grad (q, *S)
    HyperDual: value (*S,)    grad (q, *S)    hess (q, q, *S)

The trailing shape ``*S`` may contain batch axes; the linear-algebra
helpers in this module act on the last two axes only, so every function
here broadcasts over batches for free.  Binary operations first pad the
lower-rank operand's base shape with singleton axes, keeping direction
axes and batch axes from ever being conflated by broadcasting.

``Dual`` fields may themselves be ``Dual`` instances
(forward-over-forward nesting), which yields exact mixed second
derivatives of one variable group with respect to another.
``HyperDual`` fields are plain arrays.

Conventions callers must respect:

* matrices are 2-D in their trailing axes; vectors are carried as
  ``(..., n, 1)`` columns wherever they meet a matrix product,
* ``x[...]`` indexing must anchor at the trailing axes (key starts with
  ``Ellipsis``); use :func:`vindex` to address leading value axes,
* two ``Dual`` instances seeded against *different* variable groups must
  not be combined directly; lift one to a constant of the other's level
  first (see :func:`const_outer`).

Derivative propagation never forms an explicit matrix inverse: linear
solves go through a factorization (``numpy.linalg.solve``) and
log-determinants through a Cholesky factor.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Dual",
    "HyperDual",
    "value_of",
    "ndirs",
    "seed_dual",
    "seed_hyperdual",
    "first_order",
    "grad_vector",
    "hess_matrix",
    "dirslice",
    "vindex",
    "vsum",
    "const_like",
    "const_outer",
    "log",
    "exp",
    "sqrt",
    "mT",
    "sym2",
    "trace",
    "solve",
    "logdet_pd",
    "det_pd",
    "block_matrix",
    "stack_last",
    "concat_last",
    "concat_rows",
]


def _is_ad(x):
    return isinstance(x, (Dual, HyperDual))


def value_of(x):
    """Strip every derivative layer, returning the plain value."""
    while _is_ad(x):
        x = x.value
    return x


def _lead_len(field):
    while _is_ad(field):
        field = field.value
    return np.shape(field)[0]


def ndirs(x):
    """Number of derivative directions carried by ``x``."""
    return _lead_len(x.grad)


def _base_ndim(x):
    return np.ndim(value_of(x))


def _swap01(a):
    return np.swapaxes(a, 0, 1)


def _field_apply(field, depth, fn):
    """Apply ``fn(array, axis)`` to a field, skipping its own dirs axes."""
    if isinstance(field, Dual):
        return Dual(
            _field_apply(field.value, depth, fn),
            _field_apply(field.grad, depth + 1, fn),
        )
    if isinstance(field, HyperDual):
        return HyperDual(
            _field_apply(field.value, depth, fn),
            _field_apply(field.grad, depth + 1, fn),
            _field_apply(field.hess, depth + 2, fn),
        )
    return fn(field, depth)


def _pad_base(x, add):
    """Insert ``add`` singleton axes between dirs axes and the base shape."""
    if add <= 0 or not _is_ad(x):
        return x

    def fn(arr, depth):
        arr = np.asarray(arr)
        return arr.reshape(arr.shape[:depth] + (1,) * add + arr.shape[depth:])

    return _field_apply(x, 0, fn)


def _coerce2(a, b):
    """Equalize the base ranks of two operands (either may be plain)."""
    na, nb = _base_ndim(a), _base_ndim(b)
    if na < nb:
        a = _pad_base(a, nb - na)
    elif nb < na:
        b = _pad_base(b, na - nb)
    return a, b


class Dual:
    """First-order forward-mode number: ``value`` plus directional grads."""

    __slots__ = ("value", "grad")
    __array_ufunc__ = None  # keep numpy from consuming us in mixed ops

    def __init__(self, value, grad):
        self.value = value
        self.grad = grad

    def __repr__(self):
        return f"Dual(value={self.value!r})"

    # -- arithmetic ----------------------------------------------------
    def __neg__(self):
        return Dual(-self.value, -self.grad)

    def __add__(self, other):
        if isinstance(other, HyperDual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, Dual):
            return Dual(a.value + b.value, a.grad + b.grad)
        return Dual(a.value + b, a.grad)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, HyperDual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, Dual):
            return Dual(a.value - b.value, a.grad - b.grad)
        return Dual(a.value - b, a.grad)

    def __rsub__(self, other):
        a, b = _coerce2(self, other)
        return Dual(b - a.value, -a.grad)

    def __mul__(self, other):
        if isinstance(other, HyperDual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, Dual):
            return Dual(a.value * b.value, a.grad * b.value + a.value * b.grad)
        return Dual(a.value * b, a.grad * b)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, HyperDual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, Dual):
            v = a.value / b.value
            return Dual(v, (a.grad - v * b.grad) / b.value)
        return Dual(a.value / b, a.grad / b)

    def __rtruediv__(self, other):
        a, b = _coerce2(self, other)
        v = b / a.value
        return Dual(v, -(v * a.grad) / a.value)

    def __pow__(self, k):
        v = self.value
        return Dual(v**k, (k * v ** (k - 1)) * self.grad)

    def __matmul__(self, other):
        if isinstance(other, HyperDual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, Dual):
            return Dual(a.value @ b.value, a.grad @ b.value + a.value @ b.grad)
        return Dual(a.value @ b, a.grad @ b)

    def __rmatmul__(self, other):
        a, b = _coerce2(self, other)
        return Dual(b @ a.value, b @ a.grad)

    def __getitem__(self, key):
        key = _check_trailing_key(key)
        return Dual(self.value[key], self.grad[key])


class HyperDual:
    """Second-order forward-mode number with a symmetric Hessian block.

    Fields are plain arrays (no nesting).  Every rule below constructs the
    ``hess`` contribution of a product of first-order terms as
    ``t + swapaxes(t, 0, 1)``, so the block stays bitwise symmetric under
    exact floating-point commutativity of ``+`` and ``*``.
    """

    __slots__ = ("value", "grad", "hess")
    __array_ufunc__ = None

    def __init__(self, value, grad, hess):
        self.value = value
        self.grad = grad
        self.hess = hess

    def __repr__(self):
        return f"HyperDual(value={self.value!r})"

    def __neg__(self):
        return HyperDual(-self.value, -self.grad, -self.hess)

    def __add__(self, other):
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, HyperDual):
            return HyperDual(a.value + b.value, a.grad + b.grad, a.hess + b.hess)
        return HyperDual(a.value + b, a.grad, a.hess)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, HyperDual):
            return HyperDual(a.value - b.value, a.grad - b.grad, a.hess - b.hess)
        return HyperDual(a.value - b, a.grad, a.hess)

    def __rsub__(self, other):
        a, b = _coerce2(self, other)
        return HyperDual(b - a.value, -a.grad, -a.hess)

    def __mul__(self, other):
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, HyperDual):
            cross = a.grad[:, None] * b.grad[None, :]
            return HyperDual(
                a.value * b.value,
                a.grad * b.value + a.value * b.grad,
                a.hess * b.value + a.value * b.hess + (cross + _swap01(cross)),
            )
        return HyperDual(a.value * b, a.grad * b, a.hess * b)

    __rmul__ = __mul__

    def __truediv__(self, other):
        # direct rule keeps the value path identical to plain division
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, HyperDual):
            v = a.value / b.value
            g = (a.grad - v * b.grad) / b.value
            cross = g[:, None] * b.grad[None, :]
            h = (a.hess - (cross + _swap01(cross)) - v * b.hess) / b.value
            return HyperDual(v, g, h)
        return HyperDual(a.value / b, a.grad / b, a.hess / b)

    def __rtruediv__(self, other):
        a, b = _coerce2(self, other)
        v = b / a.value
        g = -(v * a.grad) / a.value
        cross = g[:, None] * a.grad[None, :]
        h = (-(cross + _swap01(cross)) - v * a.hess) / a.value
        return HyperDual(v, g, h)

    def __pow__(self, k):
        v = self.value
        outer = self.grad[:, None] * self.grad[None, :]
        return HyperDual(
            v**k,
            (k * v ** (k - 1)) * self.grad,
            (k * v ** (k - 1)) * self.hess + (k * (k - 1) * v ** (k - 2)) * outer,
        )

    def __matmul__(self, other):
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(self, other)
        if isinstance(b, HyperDual):
            cross = a.grad[:, None] @ b.grad[None, :]
            return HyperDual(
                a.value @ b.value,
                a.grad @ b.value + a.value @ b.grad,
                a.hess @ b.value + a.value @ b.hess + (cross + _swap01(cross)),
            )
        return HyperDual(a.value @ b, a.grad @ b, a.hess @ b)

    def __rmatmul__(self, other):
        a, b = _coerce2(self, other)
        return HyperDual(b @ a.value, b @ a.grad, b @ a.hess)

    def __getitem__(self, key):
        key = _check_trailing_key(key)
        return HyperDual(self.value[key], self.grad[key], self.hess[key])


def _check_trailing_key(key):
    if not isinstance(key, tuple):
        key = (key,)
    if key[0] is not Ellipsis:
        raise IndexError(
            "derivative-carrying arrays only support trailing-anchored "
            "indexing; start the key with '...' or use vindex()"
        )
    return key


# -- structural helpers ------------------------------------------------


def vindex(x, idx):
    """Index the leading *value* axis of ``x`` (ints, arrays, slices)."""
    return _field_apply(x, 0, lambda a, k: a[(slice(None),) * k + (idx,)])


def vsum(x):
    """Sum over the leading value axis."""
    return _field_apply(x, 0, lambda a, k: a.sum(axis=k))


def dirslice(x, i):
    """Directional derivative of ``x`` along direction ``i``.

    Returns an object one derivative level below ``x`` (possibly still a
    ``Dual`` when ``x`` is nested).
    """
    return vindex(x.grad, i)


def first_order(x):
    """Downgrade a HyperDual to a Dual; Duals and plain arrays pass through."""
    if isinstance(x, HyperDual):
        return Dual(x.value, x.grad)
    return x


def grad_vector(x):
    """Gradient of ``x`` with the directions axis moved last: ``(*S, q)``."""
    return np.moveaxis(np.asarray(x.grad), 0, -1)


def hess_matrix(x):
    """Hessian of ``x`` with direction axes moved last: ``(*S, q, q)``."""
    return np.moveaxis(np.asarray(x.hess), (0, 1), (-2, -1))


def _zeros_like_struct(x, lead):
    # the new dirs axes sit between any inner dirs axes and the base, so
    # nested fields keep the dirs-leading layout
    def zeros(a, k):
        shape = np.shape(a)
        return np.zeros(shape[:k] + lead + shape[k:], dtype=float)

    return _field_apply(x, 0, zeros)


def const_like(template, x):
    """Lift plain ``x`` to ``template``'s derivative level, zero derivatives.

    Zero derivative fields use singleton direction axes, relying on
    broadcasting when combined with genuinely seeded operands.
    """
    if isinstance(template, Dual):
        xv = const_like(template.value, x)
        return Dual(xv, _zeros_like_struct(xv, (1,)))
    if isinstance(template, HyperDual):
        return HyperDual(
            x, _zeros_like_struct(x, (1,)), _zeros_like_struct(x, (1, 1))
        )
    return x


def const_outer(x):
    """Wrap ``x`` one derivative level up, as a constant of the new group.

    Used to mix already-seeded inner duals into a program running at an
    outer derivative level (forward-over-forward).
    """
    return Dual(x, _zeros_like_struct(x, (1,)))


def seed_dual(theta):
    """Wrap a parameter array ``(..., p)`` as a Dual seeded per component."""
    theta = np.asarray(theta, dtype=float)
    p = theta.shape[-1]
    eye = np.eye(p).reshape((p,) + (1,) * (theta.ndim - 1) + (p,))
    return Dual(theta, np.ascontiguousarray(np.broadcast_to(eye, (p,) + theta.shape)))


def seed_hyperdual(theta):
    """Wrap a parameter array ``(..., p)`` as a HyperDual seeded per component."""
    d = seed_dual(theta)
    p = d.value.shape[-1]
    return HyperDual(d.value, d.grad, np.zeros((p, p) + d.value.shape))


# -- elementwise functions ---------------------------------------------
# First-order branches express the local derivative with generic ops so
# that nested (Dual-in-Dual) fields propagate correctly.


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.value), x.grad / x.value)
    if isinstance(x, HyperDual):
        v, g = x.value, x.grad
        outer = g[:, None] * g[None, :]
        return HyperDual(np.log(v), g / v, x.hess / v - outer / (v * v))
    return np.log(x)


def exp(x):
    if isinstance(x, Dual):
        fv = exp(x.value)
        return Dual(fv, fv * x.grad)
    if isinstance(x, HyperDual):
        fv = np.exp(x.value)
        outer = x.grad[:, None] * x.grad[None, :]
        return HyperDual(fv, fv * x.grad, fv * x.hess + fv * outer)
    return np.exp(x)


def sqrt(x):
    if isinstance(x, Dual):
        fv = sqrt(x.value)
        return Dual(fv, x.grad / (2.0 * fv))
    if isinstance(x, HyperDual):
        fv = np.sqrt(x.value)
        outer = x.grad[:, None] * x.grad[None, :]
        return HyperDual(
            fv,
            x.grad / (2.0 * fv),
            x.hess / (2.0 * fv) - outer / (4.0 * fv * x.value),
        )
    return np.sqrt(x)


# -- linear algebra ----------------------------------------------------


def mT(x):
    """Transpose of the trailing two axes, through derivative layers."""
    if isinstance(x, Dual):
        return Dual(mT(x.value), mT(x.grad))
    if isinstance(x, HyperDual):
        return HyperDual(mT(x.value), mT(x.grad), mT(x.hess))
    return np.swapaxes(x, -1, -2)


def sym2(x):
    """Exact symmetrization of the trailing two axes: ``(x + x.T) / 2``."""
    return (x + mT(x)) * 0.5


def trace(x):
    if isinstance(x, Dual):
        return Dual(trace(x.value), trace(x.grad))
    if isinstance(x, HyperDual):
        return HyperDual(trace(x.value), trace(x.grad), trace(x.hess))
    return np.trace(x, axis1=-2, axis2=-1)


def solve(a, b):
    """Solve ``a @ x = b`` for matrices ``b`` shaped ``(..., n, k)``.

    Differentiates through the solve with the usual implicit rules; the
    second-order rule feeds the symmetrized cross term
    ``A_i @ x_j + A_j @ x_i`` back through the factorization of ``a``.
    """
    if isinstance(a, HyperDual):
        if isinstance(b, Dual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(a, b)
        bh = b if isinstance(b, HyperDual) else None
        xv = solve(a.value, bh.value if bh else b)
        rhs_g = (bh.grad if bh else 0.0) - a.grad @ xv
        xg = solve(a.value, rhs_g)
        cross = a.grad[:, None] @ xg[None, :]
        rhs_h = -a.hess @ xv - (cross + _swap01(cross))
        if bh is not None:
            rhs_h = rhs_h + bh.hess
        return HyperDual(xv, xg, solve(a.value, rhs_h))
    if isinstance(a, Dual):
        if isinstance(b, HyperDual):
            raise TypeError("cannot mix Dual and HyperDual operands")
        a, b = _coerce2(a, b)
        bd = b if isinstance(b, Dual) else None
        xv = solve(a.value, bd.value if bd else b)
        rhs = (bd.grad if bd else 0.0) - a.grad @ xv
        return Dual(xv, solve(a.value, rhs))
    if isinstance(b, Dual):
        a, b = _coerce2(a, b)
        return Dual(solve(a, b.value), solve(a, b.grad))
    if isinstance(b, HyperDual):
        a, b = _coerce2(a, b)
        return HyperDual(solve(a, b.value), solve(a, b.grad), solve(a, b.hess))
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim > b.ndim:
        b = np.broadcast_to(b, a.shape[:-2] + b.shape[-2:])
    return np.linalg.solve(a, b)


def _chol_logdet(a):
    # 2 * sum(log(diag(chol(a)))), batched over leading axes
    cf = np.linalg.cholesky(a)
    d = np.diagonal(cf, axis1=-2, axis2=-1)
    return 2.0 * np.sum(np.log(d), axis=-1)


def logdet_pd(a):
    """Log-determinant of a symmetric positive definite matrix.

    First derivative: ``tr(A^-1 A_i)``.  Second derivative:
    ``tr(A^-1 A_ij) - tr(A^-1 A_i A^-1 A_j)``, with the second term
    explicitly symmetrized so the Hessian block keeps exact symmetry.
    Raises ``numpy.linalg.LinAlgError`` when the value part has no
    Cholesky factor; jitter policies live with the callers.
    """
    if isinstance(a, Dual):
        x = solve(a.value, a.grad)
        return Dual(logdet_pd(a.value), trace(x))
    if isinstance(a, HyperDual):
        x = np.asarray(solve(a.value, a.grad))
        t1 = trace(solve(a.value, a.hess))
        cross = trace(x[:, None] @ x[None, :])
        return HyperDual(
            _chol_logdet(a.value), trace(x), t1 - 0.5 * (cross + _swap01(cross))
        )
    return _chol_logdet(a)


def det_pd(a):
    """Determinant of a PD matrix as ``exp(logdet_pd(a))``."""
    return exp(logdet_pd(a))


# -- assembly ----------------------------------------------------------


def _kind_rank(x):
    if isinstance(x, HyperDual):
        return 2
    if isinstance(x, Dual):
        return 1
    return 0


def _promote_kind(entries):
    ranks = [_kind_rank(e) for e in entries]
    top = max(ranks)
    if top == 0:
        return entries
    if any(0 < r < top for r in ranks):
        raise TypeError("cannot mix Dual and HyperDual operands")
    template = entries[ranks.index(top)]
    entries = [
        e if _kind_rank(e) == top else const_like(template, e) for e in entries
    ]
    width = max(_base_ndim(e) for e in entries)
    return [_pad_base(e, width - _base_ndim(e)) for e in entries]


def _stack(entries, axis):
    entries = _promote_kind(entries)
    e0 = entries[0]
    if isinstance(e0, Dual):
        return Dual(
            _stack([e.value for e in entries], axis),
            _stack([e.grad for e in entries], axis),
        )
    if isinstance(e0, HyperDual):
        return HyperDual(
            _stack([e.value for e in entries], axis),
            _stack([e.grad for e in entries], axis),
            _stack([e.hess for e in entries], axis),
        )
    arrays = [np.asarray(e, dtype=float) for e in entries]
    shape = np.broadcast_shapes(*[a.shape for a in arrays])
    return np.stack([np.broadcast_to(a, shape) for a in arrays], axis=axis)


def stack_last(entries):
    """Stack scalars-with-derivatives into a new trailing axis."""
    return _stack(entries, -1)


def block_matrix(rows):
    """Build a matrix ``(..., nrows, ncols)`` from scalar entries.

    ``rows`` is a list of lists; entries may be plain numbers, arrays or
    derivative-carrying scalars and are promoted to a common kind.
    """
    return _stack([stack_last(row) for row in rows], -2)


def _concat(entries, axis):
    if axis not in (-1, -2):
        raise ValueError("concatenation is restricted to the trailing axes")
    entries = _promote_kind(entries)
    e0 = entries[0]
    if isinstance(e0, Dual):
        return Dual(
            _concat([e.value for e in entries], axis),
            _concat([e.grad for e in entries], axis),
        )
    if isinstance(e0, HyperDual):
        return HyperDual(
            _concat([e.value for e in entries], axis),
            _concat([e.grad for e in entries], axis),
            _concat([e.hess for e in entries], axis),
        )
    arrays = [np.asarray(e, dtype=float) for e in entries]
    # broadcast everything except the concatenation axis
    if axis == -1:
        common = np.broadcast_shapes(*[a.shape[:-1] for a in arrays])
        arrays = [np.broadcast_to(a, common + a.shape[-1:]) for a in arrays]
    else:
        common = np.broadcast_shapes(
            *[a.shape[:-2] + a.shape[-1:] for a in arrays]
        )
        arrays = [
            np.broadcast_to(a, common[:-1] + (a.shape[-2], common[-1]))
            for a in arrays
        ]
    return np.concatenate(arrays, axis=axis)


def concat_last(entries):
    """Concatenate along the trailing axis, promoting kinds as needed."""
    return _concat(entries, -1)


def concat_rows(entries):
    """Concatenate along the second-to-last axis."""
    return _concat(entries, -2)
