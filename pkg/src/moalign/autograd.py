"""Dense float64 tensors with reverse-mode gradients.

Every differentiable operation records its parents and a closure that maps the
output gradient to parent gradients.  ``Tensor.backward`` walks the recorded
graph in reverse topological order, visiting each node once.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
MASK_FILL = -1e9
INIT_STD = 0.02


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root):
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


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def sqrt(x):
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x):
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def relu(x):
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    keep = x.data > 0
    return _result(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def where(cond, a, b):
    """Select from ``a`` where ``cond`` holds, else from ``b`` (cond is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                              _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape):
    out = np.broadcast_to(x.data, shape)
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def index(x, idx):
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (x,), backward)


def gather_rows(table, idx):
    """``table[idx]`` for an integer array of any shape (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.intp)
    return index(table, idx)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


def linear(x, W, b=None):
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} does not match weight {W.shape}")
    y = matmul(x, W)
    return y if b is None else y + b


def softmax_rows(x, additive=None):
    """Softmax over the last axis, stabilized by subtracting the row max.

    ``additive`` is an optional constant added before normalization (mask weights).
    """
    z = x.data if additive is None else x.data + additive
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out,)

    return _result(out, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis with population variance, then scale and shift."""
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features")
    gain, bias = as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


def standardize(x, lam, floor=1e-6):
    """Zero mean, population std ``lam`` over the last axis; std is floored."""
    c = x - mean(x, axis=-1, keepdims=True)
    var = mean(c * c, axis=-1, keepdims=True)
    var = where(var.data > floor * floor, var, floor * floor)
    return c / sqrt(var) * lam


def dropout(x, p, rng=None, training=True):
    """Inverted dropout; identity when not training or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- init & checks

def truncated_normal(rng, shape, std=INIT_STD, bound=2.0):
    """Normal(0, std) samples redrawn until they fall within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps=1e-5, coords=None, floor=1e-8):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor; ``x.data`` is perturbed in place and
    restored.  ``coords`` optionally restricts the check to flat indices.
    The relative error per coordinate uses ``max(|analytic|, |numeric|, floor)``
    as denominator.
    """
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if not np.isfinite(y.data).all():
        raise FloatingPointError("f(x) is not finite")
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x).data)
        flat[i] = orig - eps
        fm = float(f(x).data)
        flat[i] = orig
        num = (fp - fm) / (2 * eps)
        ana = analytic.reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    x.grad = None
    return worst
