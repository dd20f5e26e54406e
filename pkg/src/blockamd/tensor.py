"""Dense float64 tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Broadcasting
is limited to a leading batch dimension: the second operand of ``add``/``mul``
(and the right operand of ``matmul``) may drop leading axes of the first,
nothing else.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

NEG_INF = -1e30
_MASKED_ROW = NEG_INF / 2

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        return backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check_broadcast(a, b, name):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    raise ShapeError(f"{name}: shapes {sa} and {sb} do not conform")


def _reduce_to(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return g, _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return g * b.data, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a, s):
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def matmul(a, b):
    """Product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a):
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose: shape {a.shape} has fewer than 2 axes")
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def _masked_softmax(x, mask):
    dead = None
    if mask is None:
        s = x
    else:
        m = np.maximum(np.asarray(mask, dtype=np.float64), NEG_INF)
        if m.ndim > x.ndim or m.shape != x.shape[x.ndim - m.ndim:]:
            raise ShapeError(f"softmax: mask shape {m.shape} vs input {x.shape}")
        s = x + m
        dead = np.all(m <= _MASKED_ROW, axis=-1)
        if not dead.any():
            dead = None
        elif m.ndim < x.ndim:
            dead = np.broadcast_to(dead, x.shape[:-1])
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=-1, keepdims=True)
    if dead is not None:
        p[dead] = 1.0 / x.shape[-1]
    return p, dead


def softmax(x, mask=None):
    """Row softmax with an optional additive mask (``-inf`` entries allowed).

    A row whose keys are all masked yields a uniform distribution and passes
    no gradient.
    """
    p, dead = _masked_softmax(x.data, mask)

    def bw(g):
        gx = p * (g - (g * p).sum(axis=-1, keepdims=True))
        if dead is not None:
            gx[dead] = 0.0
        return (gx,)

    return _make(p, (x,), bw, "softmax")


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        g2 = g.reshape(-1, n)
        ggamma = (g2 * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gh = g * gamma.data
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation of GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * v2 * v))

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(0.5 * v * (1.0 + t), (x,), bw, "gelu")


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table shape {table.shape} is not 2-d")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table shape {table.shape}")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw, "embedding")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    s0 = tensors[0].shape
    for t in tensors[1:]:
        s1 = t.shape
        if len(s0) != len(s1) or s0[:ax] + s0[ax + 1:] != s1[:ax] + s1[ax + 1:]:
            raise ShapeError(f"concat: shapes {s0} and {s1} do not conform")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax),
                 tuple(tensors), bw, "concat")


def slice_(x, index):
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (Ellipsis, slice(0, 4)))``."""
    out = np.array(x.data[index], copy=True)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _make(out, (x,), bw, "slice")


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def reduce_sum(x):
    return _make(np.array(x.data.sum()), (x,),
                 lambda g: (np.full_like(x.data, float(g)),), "sum")


def reduce_mean(x):
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,),
                 lambda g: (np.full_like(x.data, float(g) / n),), "mean")


def custom(value, parents, backward_fn, op):
    """Wrap an externally computed value whose backward is supplied by the caller.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return _make(value, tuple(parents), backward_fn, op)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the leaves that received a gradient.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return []
    pending = {id(root): np.ones_like(root.data)}
    leaves = []
    for node in reversed(_topo(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node.grad += g
            leaves.append(node)
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            pending[key] = pending[key] + gp if key in pending else gp
    return leaves
