"""Tape-based reverse-mode automatic differentiation.

A :class:`Graph` is an append-only list of records. Each record stores the
primitive op name, the ids of its inputs (always earlier records), op
attributes and the cached forward value. :class:`Node` is a light handle to a
record that supports the usual arithmetic operators.

Model code is written against the functions in :mod:`stpn.numcore.ops`,
which dispatch here when any argument is a :class:`Node` and fall back to the
plain kernels otherwise.
"""
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from . import kernels as K


@dataclass
class Record:
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    needs_grad: bool
    name: str = None


class Node:
    __slots__ = ("graph", "id")
    __array_priority__ = 1000

    def __init__(self, graph, id):
        self.graph = graph
        self.id = id

    @property
    def value(self):
        return self.graph.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        rec = self.graph.nodes[self.id]
        return f"Node(id={self.id}, op={rec.op}, shape={self.shape})"

    def __add__(self, other):
        return self.graph.apply("add", self, other)

    def __radd__(self, other):
        return self.graph.apply("add", other, self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, other)

    def __rsub__(self, other):
        return self.graph.apply("sub", other, self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, other)

    def __rmul__(self, other):
        return self.graph.apply("mul", other, self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return self.graph.apply("mul", self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return self.graph.apply("mul", self, -1.0)

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, other)

    def __rmatmul__(self, other):
        return self.graph.apply("matmul", other, self)

    def __getitem__(self, index):
        return self.graph.apply("getitem", self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.apply("reshape", self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return self.graph.apply("transpose", self, axes=axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))


@dataclass
class Graph:
    nodes: list = field(default_factory=list)
    roots: dict = field(default_factory=dict)

    def _append(self, rec):
        self.nodes.append(rec)
        return Node(self, len(self.nodes) - 1)

    def param(self, value, name):
        """Register a trainable leaf. ``name`` is the parameter id."""
        if name in self.roots:
            raise ValueError(f"parameter {name!r} already bound")
        node = self._append(Record("param", (), {}, K.as_tensor(value).copy(), True, name))
        self.roots[name] = node.id
        return node

    def const(self, value):
        return self._append(Record("const", (), {}, K.as_tensor(value), False))

    def bind(self, params):
        """Register every array in a name->array mapping as a parameter."""
        return {name: self.param(v, name) for name, v in params.items()}

    def lift(self, x):
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)

    def apply(self, op, *inputs, **attrs):
        spec = OPS[op]
        nodes = tuple(self.lift(x) for x in inputs)
        vals = [self.nodes[n.id].value for n in nodes]
        out = spec.forward(*vals, **attrs)
        needs = any(self.nodes[n.id].needs_grad for n in nodes)
        return self._append(Record(op, tuple(n.id for n in nodes), attrs, out, needs))

    def replay(self):
        """Recompute every non-leaf value from the leaves; returns the values."""
        vals = []
        for rec in self.nodes:
            if rec.op in ("param", "const"):
                vals.append(rec.value)
            else:
                vals.append(OPS[rec.op].forward(*(vals[i] for i in rec.inputs), **rec.attrs))
        return vals

    def consumers(self, node_id):
        return [i for i, rec in enumerate(self.nodes) if node_id in rec.inputs]


def backward(graph, loss):
    """Gradients of a scalar ``loss`` node w.r.t. every parameter of ``graph``.

    Records are visited in descending id order; contributions to a record's
    gradient are summed in the order they arrive, which is fixed by the tape.
    Parameters without a path to the loss receive zeros.
    """
    if not isinstance(loss, Node) or loss.graph is not graph:
        raise ValueError("loss must be a node of this graph")
    if loss.value.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.id: np.ones_like(loss.value)}
    nodes = graph.nodes
    for i in range(loss.id, -1, -1):
        g = grads.get(i)
        rec = nodes[i]
        if g is None or not rec.inputs:
            continue
        needs = tuple(nodes[j].needs_grad for j in rec.inputs)
        if not any(needs):
            continue
        in_vals = [nodes[j].value for j in rec.inputs]
        contribs = OPS[rec.op].vjp(g, rec.value, in_vals, needs, **rec.attrs)
        for j, need, c in zip(rec.inputs, needs, contribs):
            if not need or c is None:
                continue
            if j in grads:
                grads[j] = grads[j] + c
            else:
                grads[j] = c
        if i != loss.id:
            del grads[i]
    return {
        name: grads.get(nid, np.zeros_like(nodes[nid].value))
        for name, nid in graph.roots.items()
    }


# ---------------------------------------------------------------------------
# primitive ops


@dataclass(frozen=True)
class OpSpec:
    forward: object
    vjp: object


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _add_vjp(g, out, vals, needs):
    a, b = vals
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


def _sub_vjp(g, out, vals, needs):
    a, b = vals
    return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


def _mul_vjp(g, out, vals, needs):
    a, b = vals
    ga = unbroadcast(g * b, a.shape) if needs[0] else None
    gb = unbroadcast(g * a, b.shape) if needs[1] else None
    return ga, gb


def _matmul_vjp(g, out, vals, needs):
    a, b = vals
    ga = gb = None
    if needs[0]:
        ga = unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needs[1]:
        if b.ndim == 2:
            # weight matrix: fold every batch row into one product
            gb = a.reshape(-1, a.shape[-1]).T @ np.broadcast_to(g, out.shape).reshape(-1, g.shape[-1])
        else:
            gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


def _reshape_vjp(g, out, vals, needs, shape):
    return (g.reshape(vals[0].shape),)


def _transpose_fwd(a, axes):
    return np.transpose(a, axes).copy()


def _transpose_vjp(g, out, vals, needs, axes):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _getitem_fwd(a, index):
    return np.array(a[index], dtype=np.float64)


def _getitem_vjp(g, out, vals, needs, index):
    full = np.zeros_like(vals[0])
    np.add.at(full, index, g)
    return (full,)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _concat_vjp(g, out, vals, needs, axis):
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _stack_vjp(g, out, vals, needs, axis):
    return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))


def _sum_fwd(a, axis=None):
    return np.asarray(a.sum(axis=axis), dtype=np.float64)


def _sum_vjp(g, out, vals, needs, axis=None):
    a = vals[0]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_vjp(g, out, vals, needs, axis=0, order_free=False):
    a = vals[0]
    n = a.shape[axis]
    return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)


def _ln_fwd(x, gamma, beta, eps=1e-5):
    return K.layer_norm(x, gamma, beta, eps)


def _ln_vjp(g, out, vals, needs, eps=1e-5):
    x, gamma, beta = vals
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gx = gg = gb = None
    if needs[0]:
        dxhat = g * gamma
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    if needs[1]:
        gg = unbroadcast(g * xhat, gamma.shape)
    if needs[2]:
        gb = unbroadcast(g, beta.shape)
    return gx, gg, gb


def _softmax_vjp(g, out, vals, needs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _gelu_vjp(g, out, vals, needs):
    return (g * K.gelu_grad(vals[0]),)


def _pad_fwd(a, pad_width):
    return np.pad(a, pad_width)


def _pad_vjp(g, out, vals, needs, pad_width):
    sl = tuple(slice(lo, g.shape[i] - hi) for i, (lo, hi) in enumerate(pad_width))
    return (g[sl],)


def _xent_fwd(logits, labels):
    lp = K.log_softmax(logits)
    picked = np.take_along_axis(lp, labels[..., None], axis=-1)
    return np.asarray(-picked.mean(), dtype=np.float64)


def _xent_vjp(g, out, vals, needs, labels):
    logits = vals[0]
    p = K.softmax(logits)
    np.put_along_axis(p, labels[..., None], np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1)
    return (g * p / labels.size,)


OPS = {
    "add": OpSpec(lambda a, b: a + b, _add_vjp),
    "sub": OpSpec(lambda a, b: a - b, _sub_vjp),
    "mul": OpSpec(lambda a, b: a * b, _mul_vjp),
    "matmul": OpSpec(K.matmul, _matmul_vjp),
    "reshape": OpSpec(lambda a, shape: a.reshape(shape), _reshape_vjp),
    "transpose": OpSpec(_transpose_fwd, _transpose_vjp),
    "getitem": OpSpec(_getitem_fwd, _getitem_vjp),
    "concat": OpSpec(_concat_fwd, _concat_vjp),
    "stack": OpSpec(lambda *xs, axis: np.stack(xs, axis=axis), _stack_vjp),
    "sum": OpSpec(_sum_fwd, _sum_vjp),
    "mean": OpSpec(K.mean_over_axis, _mean_vjp),
    "layer_norm": OpSpec(_ln_fwd, _ln_vjp),
    "softmax": OpSpec(lambda a: K.softmax(a, axis=-1), _softmax_vjp),
    "gelu": OpSpec(K.gelu, _gelu_vjp),
    "pad": OpSpec(_pad_fwd, _pad_vjp),
    "cross_entropy": OpSpec(lambda logits, labels: _xent_fwd(logits, labels),
                            lambda g, out, vals, needs, labels: _xent_vjp(g, out, vals, needs, labels)),
}
