"""A small reverse-mode autodiff tensor over float64 numpy arrays."""
from __future__ import annotations

import contextlib

import numpy as np

from .. import _kernels

_GRAD_ENABLED = True
# active-set signature of piecewise ops (ReLU masks, max arguments, signs);
# gradcheck compares it across finite-difference probes to spot kink crossings
_KINK = {"on": False, "sig": [], "scale": []}


@contextlib.contextmanager
def track_kinks():
    prev = (_KINK["on"], _KINK["sig"], _KINK["scale"])
    _KINK["on"], _KINK["sig"], _KINK["scale"] = True, [], []
    try:
        yield _KINK["sig"]
    finally:
        _KINK["on"], _KINK["sig"], _KINK["scale"] = prev


def note_pattern(arr):
    if _KINK["on"]:
        _KINK["sig"].append(np.asarray(arr).tobytes())


def note_scale(kind, value):
    """Record a magnitude whose smallness means high curvature (a batch
    variance, a cosine norm); gradcheck compares it against a floor."""
    if _KINK["on"]:
        _KINK["scale"].append((kind, float(value)))


def noted_scales():
    return list(_KINK["scale"])


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- basic protocol --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once consumed
                if node._parents:
                    node.grad = None if node is not self else node.grad

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and parents:
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# --------------------------------------------------------------------------
# elementwise binary
# --------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


# --------------------------------------------------------------------------
# elementwise unary
# --------------------------------------------------------------------------

def power(x, p: float):
    """``x ** p`` for a constant exponent."""
    x = as_tensor(x)
    p = float(p)
    out = x.data**p

    def bw(g):
        _accum(x, g * p * x.data ** (p - 1.0))

    return _make(out, (x,), bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * 0.5 / out))


def absolute(x):
    x = as_tensor(x)
    note_pattern(np.sign(x.data))
    return _make(np.abs(x.data), (x,), lambda g: _accum(x, g * np.sign(x.data)))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    note_pattern(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)))


def softplus(x):
    x = as_tensor(x)
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return _make(out, (x,), lambda g: _accum(x, g * _sigmoid_np(z)))


# --------------------------------------------------------------------------
# linear algebra and reductions
# --------------------------------------------------------------------------

def matmul(x, w):
    """``(..., n) @ (n, m)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot contract {x.shape} with {w.shape}")
    out = x.data @ w.data

    def bw(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            x2 = x.data.reshape(-1, x.shape[-1])
            _accum(w, x2.T @ g.reshape(-1, w.shape[1]))

    return _make(out, (x, w), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: _accum(x, _expand(g, x.shape, axes, keepdims)))


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(out, (x,), lambda g: _accum(x, _expand(g / n, x.shape, axes, keepdims)))


def reduce_max(x, axis: int):
    """Max along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    note_pattern(arg)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(x, full)

    return _make(out, (x,), bw)


def neighbor_mean(x, axis: int = 1):
    """Mean over the neighbor axis, summed in sorted order.

    Summing the sorted values makes the result bit-identical under any
    permutation of the neighbors.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    k = x.shape[axis]
    out = np.sort(x.data, axis=axis).sum(axis=axis) / k

    def bw(g):
        _accum(x, np.broadcast_to(np.expand_dims(g / k, axis), x.shape))

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.shape)))


def getitem(x, key):
    x = as_tensor(x)

    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, key, g)
        _accum(x, full)

    return _make(x.data[key], (x,), bw)


def gather_rows(x, idx):
    """``x[idx]`` for a 2-D ``x``; any integer shape for ``idx``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D source, got {x.shape}")
    out = x.data[idx]

    def bw(g):
        full = np.zeros(x.shape)
        _kernels.scatter_add_rows(full, idx.reshape(-1), np.ascontiguousarray(g.reshape(-1, x.shape[1])))
        _accum(x, full)

    return _make(out, (x,), bw)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, ts, bw)


def repeat_groups(x, group_size: int, channels: int):
    """Broadcast per-group values on the last axis to ``channels`` entries.

    Group ``g`` covers channels ``g*G .. g*G+G-1``; a final partial group is
    truncated.
    """
    x = as_tensor(x)
    n_groups = x.shape[-1]
    if n_groups * group_size < channels:
        raise ShapeError("repeat_groups: not enough groups for the channel count")
    out = np.repeat(x.data, group_size, axis=-1)[..., :channels]

    def bw(g):
        padded = np.zeros(g.shape[:-1] + (n_groups * group_size,))
        padded[..., :channels] = g
        _accum(x, padded.reshape(g.shape[:-1] + (n_groups, group_size)).sum(-1))

    return _make(out, (x,), bw)


# --------------------------------------------------------------------------
# fused numerics
# --------------------------------------------------------------------------

def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        _accum(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw)


def batch_norm(x, scale, shift, eps=1e-5):
    """Training-mode normalization over every axis but the last.

    Returns the output tensor plus the batch mean and population variance
    (plain arrays) for running-average bookkeeping.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch_norm: parameters must have shape ({c},)")
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    # sorted sums keep the statistics independent of row order
    mu = np.sort(x2, axis=0).sum(axis=0) / n
    xc = x2 - mu
    var = np.sort(xc * xc, axis=0).sum(axis=0) / n
    note_scale("bn_var", var.min())
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * scale.data + shift.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, c)
        if shift.requires_grad:
            _accum(shift, g2.sum(axis=0))
        if scale.requires_grad:
            _accum(scale, (g2 * xhat).sum(axis=0))
        if x.requires_grad:
            dxhat = g2 * scale.data
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            _accum(x, dx.reshape(x.shape))

    return _make(out, (x, scale, shift), bw), mu, var


def transpose(x):
    """Swap the two axes of a 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects 2-D input, got {x.shape}")
    return _make(x.data.T, (x,), lambda g: _accum(x, g.T))


def pow_tensor(base, exponent):
    """Elementwise ``base ** exponent`` with both operands differentiable.

    ``np.power`` keeps ``x ** 1 == x`` and ``1 ** y == 1`` exact.  ``base``
    must be positive wherever the exponent gradient is needed.
    """
    base, exponent = as_tensor(base), as_tensor(exponent)
    _check_broadcast(base, exponent, "pow_tensor")
    out = np.power(base.data, exponent.data)

    def bw(g):
        if base.requires_grad:
            d = exponent.data * np.power(base.data, exponent.data - 1.0)
            _accum(base, _unbroadcast(g * d, base.shape))
        if exponent.requires_grad:
            _accum(exponent, _unbroadcast(g * out * np.log(base.data), exponent.shape))

    return _make(out, (base, exponent), bw)
