"""Reverse-mode differentiation over real and complex numpy arrays.

Operations on :class:`Tensor` run eagerly on numpy and, while a :class:`Tape`
is active and some input requires a gradient, append one node per primitive.
``Tape.gradient`` walks the nodes in reverse append order.

Complex convention: every loss is real, and the adjoint carried for a complex
value ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``.  With that convention a
holomorphic ``w = f(z)`` back-propagates as ``g_z = g_w * conj(f'(z))``, and
the adjoint of a real input fed into a complex op is the real part of the
complex adjoint.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from . import scan as _scan

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE: list["Tape"] = []
_ROW_INVARIANT: list[bool] = []


class row_invariant:
    """Context in which ``matmul`` gives every output row bit-identical values
    however many rows are stacked with it.

    BLAS picks different kernels (gemv for one row, blocked gemm otherwise),
    so a row's value can move by an ulp with the batch shape.  ``einsum``
    keeps one fixed summation order per element at a few times the cost.
    """

    def __enter__(self):
        _ROW_INVARIANT.append(True)
        return self

    def __exit__(self, *exc):
        _ROW_INVARIANT.pop()
        return False


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def gradient(self, loss: "Tensor", wrt):
        """Adjoints of a scalar ``loss`` for each tensor in ``wrt``.

        Tensors the loss does not reach get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if np.iscomplexobj(loss.data):
            raise ValueError("loss must be real")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.nodes):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _fit(gi, inp.data)
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        return [adj.get(id(t), np.zeros_like(t.data)) for t in wrt]


def backward(loss: "Tensor", wrt, tape: Tape | None = None):
    """Gradient map ``{leaf: adjoint}`` over ``wrt``."""
    tape = tape if tape is not None else _ACTIVE[-1]
    return dict(zip(wrt, tape.gradient(loss, wrt)))


def _fit(g, like):
    """Sum broadcast axes away and drop the imaginary part for real targets."""
    g = np.asarray(g)
    if g.shape != like.shape:
        while g.ndim > like.ndim:
            g = g.sum(axis=0)
        axes = tuple(i for i, n in enumerate(like.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = np.broadcast_to(g, like.shape)
    if np.iscomplexobj(g) and not np.iscomplexobj(like):
        g = g.real
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data)
        if not (np.iscomplexobj(data) or data.dtype == np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.node_id = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_complex(self):
        return np.iscomplexobj(self.data)

    @property
    def real(self):
        return real(self)

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, vjp) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        tape.nodes.append((out, inputs, vjp))
    return out


# --- arithmetic --------------------------------------------------------------


def add(x, y):
    # d(x+y) = dx + dy
    x, y = as_tensor(x), as_tensor(y)
    return _record(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x, y):
    # d(x-y) = dx - dy
    x, y = as_tensor(x), as_tensor(y)
    return _record(x.data - y.data, (x, y), lambda g: (g, -g))


def neg(x):
    x = as_tensor(x)
    return _record(-x.data, (x,), lambda g: (-g,))


def mul(x, y):
    # g_x = g * conj(y), g_y = g * conj(x)
    x, y = as_tensor(x), as_tensor(y)
    xd, yd = x.data, y.data
    return _record(xd * yd, (x, y), lambda g: (g * np.conj(yd), g * np.conj(xd)))


def div(x, y):
    # w = x / y:  g_x = g / conj(y),  g_y = -g * conj(w / y)
    x, y = as_tensor(x), as_tensor(y)
    out = x.data / y.data
    yd = y.data
    return _record(out, (x, y), lambda g: (g / np.conj(yd), -g * np.conj(out / yd)))


def matmul(x, y):
    # W = X @ Y:  g_X = g @ Y^H,  g_Y = X^H @ g
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim < 2 or y.ndim < 2:
        raise ValueError("matmul needs operands with at least two axes")
    if x.shape[-1] != y.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {y.shape}")
    xd, yd = x.data, y.data

    def vjp(g):
        return (g @ np.conj(np.swapaxes(yd, -1, -2)), np.conj(np.swapaxes(xd, -1, -2)) @ g)

    out = np.einsum("...ij,...jk->...ik", xd, yd) if _ROW_INVARIANT else xd @ yd
    return _record(out, (x, y), vjp)


def transpose(x):
    x = as_tensor(x)
    return _record(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


# --- elementwise nonlinearities ---------------------------------------------


def exp(x):
    # holomorphic: g_x = g * conj(exp(x))
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * np.conj(out),))


def log(x):
    # g_x = g / x, real x > 0 only
    x = as_tensor(x)
    if x.is_complex:
        raise TypeError("log is defined for real tensors only")
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,))


def softplus(x):
    # softplus(x) = log(1 + e^x);  g_x = g * sigmoid(x)
    x = as_tensor(x)
    xd = x.data
    return _record(np.logaddexp(0.0, xd), (x,), lambda g: (g * expit(xd),))


def gelu(x):
    # gelu(x) = x * Phi(x);  g_x = g * (Phi(x) + x * phi(x))
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = xd * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), vjp)


def layer_norm(x, scale, shift, eps: float = 1e-5):
    """Affine normalisation over the last axis.

    Adjoint with ``gh = g * scale`` and ``xh`` the normalised input:
    ``g_x = (gh - mean(gh) - xh * mean(gh * xh)) / sqrt(var + eps)``.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xh = centered * inv_std
    sd = scale.data

    def vjp(g):
        gh = g * sd
        gx = inv_std * (
            gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True)
        )
        return gx, g * xh, g

    return _record(xh * sd + shift.data, (x, scale, shift), vjp)


# --- complex plumbing -------------------------------------------------------


def real(x):
    # Re is R-linear: the complex adjoint of z is the (real) adjoint of Re z
    x = as_tensor(x)
    if not x.is_complex:
        return x
    return _record(x.data.real.copy(), (x,), lambda g: (g.astype(np.complex128),))


def complex_from_parts(re, im):
    # z = re + i im:  g_re = Re(g_z), g_im = Im(g_z)
    re, im = as_tensor(re), as_tensor(im)
    out = re.data + 1j * im.data
    return _record(out, (re, im), lambda g: (g.real, g.imag))


# --- reductions and indexing ------------------------------------------------


def _normalise_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    # the adjoint broadcasts back over the summed axes
    x = as_tensor(x)
    axes = _normalise_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(out, (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _normalise_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (np.reshape(g, old),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items
    )


def getitem(x, idx):
    # scatter the adjoint back into a zero array of the input shape
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype
    basic = _is_basic_index(idx)

    def vjp(g):
        z = np.zeros(shape, dtype=np.result_type(dtype, g))
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _record(x.data[idx], (x,), vjp)


def gather_rows(table, idx):
    """Embedding lookup ``table[idx]``; adjoint is a scatter-add of rows."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("gather_rows index out of range")
    shape = table.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _record(table.data[idx], (table,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def broadcast_to(x, shape):
    x = as_tensor(x)
    return _record(np.broadcast_to(x.data, shape), (x,), lambda g: (g,))


# --- the fused linear-recurrence scan --------------------------------------


def scan(a, b, x0, parallel=None):
    """Differentiable ``x_i = a_i * x_{i-1} + b_i`` along axis ``-2``.

    One tape node for the whole recurrence.  The adjoint is a reverse scan:
    ``lam_N = g_N``, ``lam_i = g_i + conj(a_{i+1}) * lam_{i+1}``, then
    ``g_b = lam``, ``g_a = lam * conj(x_{i-1})`` and ``g_x0 = conj(a_1) * lam_1``.
    """
    a, b, x0 = as_tensor(a), as_tensor(b), as_tensor(x0)
    if a.shape != b.shape:
        raise ValueError(f"scan length mismatch: a{a.shape} vs b{b.shape}")
    ad, xd0 = a.data, x0.data
    xs = _scan.scan(ad, b.data, xd0, parallel=parallel)

    def vjp(g):
        n = ad.shape[-2]
        if n == 0:
            return np.zeros_like(ad), np.zeros_like(g), np.zeros(np.broadcast_shapes(xd0.shape, ad.shape[:-2] + ad.shape[-1:]))
        shifted = np.concatenate([np.conj(ad[..., 1:, :]), np.zeros_like(ad[..., :1, :])], axis=-2)
        lam = _scan.scan(shifted[..., ::-1, :], g[..., ::-1, :], np.zeros_like(g[..., 0, :]), parallel=parallel)
        lam = lam[..., ::-1, :]
        x0b = np.broadcast_to(xd0, xs[..., 0, :].shape)
        prev = np.concatenate([x0b[..., None, :], xs[..., :-1, :]], axis=-2)
        return lam * np.conj(prev), lam, np.conj(ad[..., 0, :]) * lam[..., 0, :]

    return _record(xs, (a, b, x0), vjp)
