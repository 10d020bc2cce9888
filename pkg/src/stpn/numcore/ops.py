"""Array-or-node operations.

Each function records onto the graph when any argument is a :class:`Node`
and otherwise evaluates the plain kernel, so the same model code serves both
training (with gradients) and fast inference.
"""
import numpy as np

from ..errors import DimensionError
from . import kernels as K
from .autodiff import Node


def _graph_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    return None


def matmul(a, b):
    g = _graph_of(a, b)
    if g is None:
        return K.matmul(a, b)
    sa, sb = np.shape(a.value if isinstance(a, Node) else a), np.shape(b.value if isinstance(b, Node) else b)
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise DimensionError(f"matmul shape mismatch: {sa} @ {sb}")
    return g.apply("matmul", a, b)


def layer_norm(x, gamma, beta, eps=1e-5):
    g = _graph_of(x, gamma, beta)
    if g is None:
        return K.layer_norm(x, gamma, beta, eps)
    if x.shape[-1] == 0:
        raise DimensionError("layer_norm over an empty axis")
    return g.apply("layer_norm", x, gamma, beta, eps=eps)


def softmax(x):
    g = _graph_of(x)
    return K.softmax(x) if g is None else g.apply("softmax", x)


def gelu(x):
    g = _graph_of(x)
    return K.gelu(x) if g is None else g.apply("gelu", x)


def mean_over_axis(x, axis=0, order_free=False):
    g = _graph_of(x)
    if g is None:
        return K.mean_over_axis(x, axis, order_free)
    if x.shape[axis] == 0:
        raise DimensionError("mean over an empty axis")
    return g.apply("mean", x, axis=axis, order_free=order_free)


def total(x, axis=None):
    g = _graph_of(x)
    return np.asarray(np.sum(x, axis=axis)) if g is None else g.apply("sum", x, axis=axis)


def concat(xs, axis=0):
    g = _graph_of(*xs)
    if g is None:
        return np.concatenate([K.as_tensor(x) for x in xs], axis=axis)
    return g.apply("concat", *xs, axis=axis)


def stack(xs, axis=0):
    g = _graph_of(*xs)
    if g is None:
        return np.stack([K.as_tensor(x) for x in xs], axis=axis)
    return g.apply("stack", *xs, axis=axis)


def reshape(x, shape):
    return x.reshape(tuple(shape))


def swap_last(x):
    """Transpose the last two axes."""
    if isinstance(x, Node):
        return x.swapaxes(-1, -2)
    return np.swapaxes(x, -1, -2)


def transpose(x, axes):
    return x.transpose(tuple(axes)) if isinstance(x, Node) else np.transpose(x, axes)


def pad(x, pad_width):
    pad_width = tuple(tuple(p) for p in pad_width)
    g = _graph_of(x)
    return np.pad(x, pad_width) if g is None else g.apply("pad", x, pad_width=pad_width)


def take(x, index):
    """``x[index]`` for basic or advanced indices."""
    return x[index] if isinstance(x, Node) else np.asarray(x)[index]


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    g = _graph_of(logits)
    if g is None:
        lp = K.log_softmax(logits)
        return float(-np.take_along_axis(lp, labels[..., None], axis=-1).mean())
    return g.apply("cross_entropy", logits, labels=labels)


def value(x):
    """Underlying array of a node or array."""
    return x.value if isinstance(x, Node) else np.asarray(x)
