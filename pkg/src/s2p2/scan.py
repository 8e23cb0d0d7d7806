"""Linear-recurrence scan kernels.

Evaluates ``x_i = a_i * x_{i-1} + b_i`` (elementwise, complex or real) for
``i = 1..N`` along the time axis of ``(batch, N, channels)`` arrays.

Two kernels produce the same values:

* ``scan_sequential`` -- one pass, ``N`` combines per channel.
* ``scan_blelloch`` -- work-efficient up-sweep / down-sweep over the associative
  combine ``(a1, b1) o (a2, b2) = (a2 * a1, a2 * b1 + b2)``; each tree level is
  a ``prange`` loop, so it runs multi-threaded under numba.

``scan`` dispatches on length: Blelloch at ``N >= PARALLEL_THRESHOLD``.
"""

from __future__ import annotations

import numba
import numpy as np

# the bundled TBB is too old for numba; prefer OpenMP, then the workqueue pool
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

PARALLEL_THRESHOLD = 4096


def combine(first, second):
    """Compose two affine maps: apply ``first`` then ``second``."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


@numba.njit(cache=True)
def _sequential_kernel(a, b, x0, out):
    nb, n, p = a.shape
    for i in range(nb):
        for c in range(p):
            x = x0[i, c]
            for t in range(n):
                x = a[i, t, c] * x + b[i, t, c]
                out[i, t, c] = x
    return nb * n * p


@numba.njit(cache=True, parallel=True)
def _blelloch_kernel(a, b, x0, out):
    # a, b: (nb, n, p) with n a power of two; padded entries are (1, 0).
    nb, n, p = a.shape
    sa = a.copy()
    sb = b.copy()
    ops = 0
    # up-sweep: node r accumulates the total of its subtree
    d = 1
    while d < n:
        step = 2 * d
        m = n // step
        for j in numba.prange(m * nb * p):
            k = j // (nb * p)
            rem = j % (nb * p)
            i = rem // p
            c = rem % p
            left = k * step + d - 1
            right = k * step + step - 1
            # (left) o (right)
            sb[i, right, c] = sa[i, right, c] * sb[i, left, c] + sb[i, right, c]
            sa[i, right, c] = sa[i, right, c] * sa[i, left, c]
        ops += m * nb * p
        d = step
    # down-sweep: exclusive prefix, root reset to identity
    for i in range(nb):
        for c in range(p):
            sa[i, n - 1, c] = 1.0
            sb[i, n - 1, c] = 0.0
    d = n // 2
    while d >= 1:
        step = 2 * d
        m = n // step
        for j in numba.prange(m * nb * p):
            k = j // (nb * p)
            rem = j % (nb * p)
            i = rem // p
            c = rem % p
            left = k * step + d - 1
            right = k * step + step - 1
            ta = sa[i, left, c]
            tb = sb[i, left, c]
            sa[i, left, c] = sa[i, right, c]
            sb[i, left, c] = sb[i, right, c]
            # prefix(parent) o total(left subtree)
            sb[i, right, c] = ta * sb[i, right, c] + tb
            sa[i, right, c] = ta * sa[i, right, c]
        ops += m * nb * p
        d = d // 2
    # inclusive result applied to the initial state
    for j in numba.prange(nb * n * p):
        i = j // (n * p)
        rem = j % (n * p)
        t = rem // p
        c = rem % p
        ea = a[i, t, c] * sa[i, t, c]
        eb = a[i, t, c] * sb[i, t, c] + b[i, t, c]
        out[i, t, c] = ea * x0[i, c] + eb
    ops += nb * n * p
    return ops


def _prepare(a, b, x0):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"scan length mismatch: a{a.shape} vs b{b.shape}")
    if a.ndim < 2:
        raise ValueError("scan inputs need a time axis and a channel axis")
    dtype = np.result_type(a, b, np.asarray(x0), np.float64)
    lead = a.shape[:-2]
    n, p = a.shape[-2:]
    nb = int(np.prod(lead)) if lead else 1
    a3 = np.ascontiguousarray(a.reshape(nb, n, p), dtype=dtype)
    b3 = np.ascontiguousarray(b.reshape(nb, n, p), dtype=dtype)
    x03 = np.ascontiguousarray(
        np.broadcast_to(np.asarray(x0, dtype=dtype), lead + (p,)).reshape(nb, p)
    )
    return a3, b3, x03, a.shape


def scan_sequential(a, b, x0, return_ops=False):
    a3, b3, x03, shape = _prepare(a, b, x0)
    out = np.empty_like(a3)
    ops = _sequential_kernel(a3, b3, x03, out) if a3.shape[1] else 0
    out = out.reshape(shape)
    return (out, ops) if return_ops else out


def scan_blelloch(a, b, x0, return_ops=False):
    a3, b3, x03, shape = _prepare(a, b, x0)
    nb, n, p = a3.shape
    if n == 0:
        out = a3.reshape(shape).copy()
        return (out, 0) if return_ops else out
    size = 1 << (n - 1).bit_length()
    if size != n:
        pad_a = np.ones((nb, size - n, p), dtype=a3.dtype)
        pad_b = np.zeros((nb, size - n, p), dtype=a3.dtype)
        a3 = np.concatenate([a3, pad_a], axis=1)
        b3 = np.concatenate([b3, pad_b], axis=1)
    out = np.empty_like(a3)
    ops = _blelloch_kernel(a3, b3, x03, out)
    out = np.ascontiguousarray(out[:, :n]).reshape(shape)
    return (out, ops) if return_ops else out


def scan(a, b, x0, parallel=None, return_ops=False):
    """States ``x_1..x_N`` of the recurrence; time axis is ``-2``.

    ``parallel=None`` picks the kernel from the sequence length.
    """
    n = np.shape(a)[-2]
    if parallel is None:
        parallel = n >= PARALLEL_THRESHOLD
    kernel = scan_blelloch if parallel else scan_sequential
    return kernel(a, b, x0, return_ops=return_ops)
