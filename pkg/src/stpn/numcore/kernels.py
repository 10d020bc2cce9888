"""Forward kernels on plain float64 arrays.

Every reduction here runs in a fixed order so results are reproducible
bit-for-bit across runs.
"""
import numba
import numpy as np
from scipy.special import erf

from ..errors import DimensionError

_SQRT2 = np.sqrt(2.0)


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


@numba.njit(cache=True)
def _mm2(a, b, out):
    # i, p, j order: each out[i, j] still accumulates p = 0, 1, ... in sequence
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


@numba.njit(cache=True)
def _mm3(a, b, out):
    for t in range(a.shape[0]):
        _mm2(a[t], b[t], out[t])


def matmul(a, b):
    """Batched matrix product with ascending inner-index accumulation.

    ``c[..., i, j] = sum_p a[..., i, p] * b[..., p, j]`` where the sum is
    accumulated left to right from zero, matching a naive triple loop
    bit-for-bit. Leading (batch) dimensions broadcast.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from None
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    out = np.zeros(batch + (m, n))
    if out.size == 0 or k == 0:
        return out
    if b.ndim == 2:
        _mm2(np.ascontiguousarray(a).reshape(-1, k), np.ascontiguousarray(b), out.reshape(-1, n))
        return out
    a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (m, k))).reshape(-1, m, k)
    b3 = np.ascontiguousarray(np.broadcast_to(b, batch + (k, n))).reshape(-1, k, n)
    _mm3(a3, b3, out.reshape(-1, m, n))
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm over an empty axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def softmax(x, axis=-1):
    x = as_tensor(x)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gelu(x):
    x = as_tensor(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def mean_over_axis(x, axis=0, order_free=False):
    """Arithmetic mean along ``axis``; the axis is dropped.

    The default accumulates slices in ascending index order. With
    ``order_free=True`` values are sorted along the axis first and averaged
    relative to the minimum, which makes the result bit-identical under any
    permutation of the axis and exact when all entries are equal.
    """
    x = as_tensor(x)
    axis = axis % x.ndim if x.ndim else 0
    n = x.shape[axis] if x.ndim else 0
    if n == 0:
        raise DimensionError("mean over an empty axis")
    x = np.moveaxis(x, axis, 0)
    if order_free:
        x = np.sort(x, axis=0)
        ref = x[0]
        acc = np.zeros_like(ref)
        for i in range(1, n):
            acc += x[i] - ref
        return ref + acc / n
    acc = np.zeros_like(x[0])
    for i in range(n):
        acc += x[i]
    return acc / n


def log_softmax(x):
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
