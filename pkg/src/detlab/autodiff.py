"""Reverse-mode automatic differentiation over dense float64 tensors.

Every operation that sees a graph-attached input records its parents and a
closure computing parent adjoints; `backward` walks the recorded graph in
reverse topological order and accumulates into `.grad` buffers. Data is
always float64: gradient-check tolerances drive precision, not speed.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_grad_enabled = True


class no_grad:
    """Disable graph construction inside a `with` block (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional gradient buffer and graph hook."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying array, detached from the graph. Do not mutate."""
        return self.data

    def detach(self):
        out = Tensor(self.data)
        return out

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.data.shape)}{flag})"

    # -- operator sugar ------------------------------------------------

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return absolute(self)

    def pow(self, exponent):
        return power(self, exponent)

    def clip(self, lo=None, hi=None):
        return clip(self, lo, hi)

    def take_rows(self, indices):
        return take_rows(self, indices)


class Parameter(Tensor):
    """Trainable tensor with a model-unique name (assigned at registration)."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents, backward):
    """Wrap an op result; attach the graph only when grad is live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------


def _binary(a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as err:
        raise DimensionError(
            f"operand shapes {a.data.shape} and {b.data.shape} do not align"
        ) from err

    def backward(adj):
        ga = _unbroadcast(da(adj, a.data, b.data), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(db(adj, a.data, b.data), b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def add(a, b):
    return _binary(a, b, np.add, lambda adj, x, y: adj, lambda adj, x, y: adj)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda adj, x, y: adj, lambda adj, x, y: -adj)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda adj, x, y: adj * y, lambda adj, x, y: adj * x)


def div(a, b):
    return _binary(
        a, b, np.divide, lambda adj, x, y: adj / y, lambda adj, x, y: -adj * x / (y * y)
    )


def minimum(a, b):
    """Elementwise min; ties route the gradient to the first argument."""
    return _binary(
        a,
        b,
        np.minimum,
        lambda adj, x, y: adj * (x <= y),
        lambda adj, x, y: adj * (x > y),
    )


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    return _binary(
        a,
        b,
        np.maximum,
        lambda adj, x, y: adj * (x >= y),
        lambda adj, x, y: adj * (x < y),
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda adj: (-adj,))


def relu(a):
    """max(x, 0); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), lambda adj: (adj * (a.data > 0.0),))


def sigmoid(a):
    a = as_tensor(a)
    data = _sigmoid(a.data)
    return _make(data, (a,), lambda adj: (adj * data * (1.0 - data),))


def _sigmoid(x):
    """Numerically stable 1/(1+exp(-x)) on raw arrays."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda adj: (adj * data,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda adj: (adj / a.data,))


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda adj: (adj * np.sign(a.data),))


def power(a, exponent):
    """x**p for a constant exponent."""
    a = as_tensor(a)
    p = float(exponent)
    data = a.data**p
    return _make(data, (a,), lambda adj: (adj * p * a.data ** (p - 1.0),))


def clip(a, lo=None, hi=None):
    """Clamp to constant bounds; the gradient is zero on clamped entries."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _make(data, (a,), lambda adj: (adj * inside,))


# -- linear algebra / shaping ----------------------------------------


def matmul(a, b):
    """Matrix product for 2-D operands or equal-batch 3-D stacks."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul requires operands with at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(
            f"matmul batch dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward(adj):
        ga = np.matmul(adj, b.data.swapaxes(-1, -2)) if a.requires_grad else None
        gb = np.matmul(a.data.swapaxes(-1, -2), adj) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def reshape(a, shape):
    a = as_tensor(a)
    original = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda adj: (adj.reshape(original),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda adj: (np.transpose(adj, inverse),))


def take_rows(a, indices):
    """Select rows along axis 0; backward scatter-adds into place."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def backward(adj):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, adj)
        return (buf,)

    return _make(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(adj):
        pieces = np.split(adj, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _make(data, tuple(tensors), backward)


# -- reductions -------------------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(adj):
        return (_spread(adj, a.data.shape, axis, keepdims),)

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    """Arithmetic mean; backward distributes 1/n to each contributor."""
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    if n == 0:
        raise DimensionError("mean over a zero-length axis")
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(adj):
        return (_spread(adj, a.data.shape, axis, keepdims) / n,)

    return _make(data, (a,), backward)


def _spread(adj, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(adj, shape)
    if not keepdims:
        adj = np.expand_dims(adj, axis)
    return np.broadcast_to(adj, shape)


def softmax(a, axis=-1):
    """Max-stabilized softmax along `axis`; slices sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(adj):
        inner = (adj * data).sum(axis=axis, keepdims=True)
        return (data * (adj - inner),)

    return _make(data, (a,), backward)


def layer_norm(a, gain, shift, eps=1e-5):
    """Normalize over the last axis, then scale by `gain` and add `shift`."""
    a, gain, shift = as_tensor(a), as_tensor(gain), as_tensor(shift)
    d = a.data.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    data = xhat * gain.data + shift.data

    def backward(adj):
        if a.requires_grad:
            gy = adj * gain.data
            ga = inv * (
                gy
                - gy.mean(axis=-1, keepdims=True)
                - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
            )
        else:
            ga = None
        gg = _unbroadcast(adj * xhat, gain.data.shape) if gain.requires_grad else None
        gs = _unbroadcast(adj, shift.data.shape) if shift.requires_grad else None
        return ga, gg, gs

    del d
    return _make(data, (a, gain, shift), backward)


def custom_scalar(value, parent, grad_fn):
    """Scalar node with a caller-supplied gradient w.r.t. `parent`.

    `grad_fn(adj)` must return the parent adjoint with the parent's shape.
    Used for losses that are defined by their gradient field rather than by
    a differentiable expression.
    """
    parent = as_tensor(parent)
    return _make(np.float64(value), (parent,), lambda adj: (grad_fn(adj),))


# -- the reverse pass -------------------------------------------------


def _topo_order(root):
    # Mark nodes when expanded, not when pushed: a node reachable through
    # two paths (x used twice) must stay on the stack until every consumer
    # above it has been expanded, or postorder breaks and a gradient path
    # is silently dropped.
    order = []
    seen = set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, seed=None):
    """Accumulate adjoints of `loss` into `.grad` of every reachable
    requires_grad tensor. Repeated calls keep accumulating."""
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward seed must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    adjoints = {id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        adj = adjoints.pop(id(node), None)
        if adj is None:
            continue
        if node.requires_grad:
            node.grad = adj if node.grad is None else node.grad + adj
        if node._backward is None:
            continue
        for parent, g in zip(node._parents, node._backward(adj)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + g
            else:
                adjoints[key] = g


# -- verification -----------------------------------------------------


def finite_difference_check(fn, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `fn` maps a Tensor to a scalar Tensor and must be deterministic. The
    error for each element is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-12).
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = fn(probe)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = fn(probe).item()
            flat[i] = keep - eps
            lo = fn(probe).item()
            flat[i] = keep
            num_flat[i] = (hi - lo) / (2.0 * eps)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise NumericError("non-finite gradient encountered during check")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
