"""A small reverse-mode autodiff engine over numpy arrays.

Every op returns a new :class:`Tensor` holding its parents and a closure
that pushes the output gradient back to them. :func:`backward` sorts the
graph topologically and runs each closure once.
"""

from __future__ import annotations

import numpy as np


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None, _parents=(), _op=""):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b):
    # constants adopt the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def _make(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), back, "mul")


elementwise_mul = mul


def neg(a):
    def back(g):
        _accum(a, -g)

    return _make(-a.data, (a,), back, "neg")


def scale(a, c):
    c = float(c)

    def back(g):
        _accum(a, g * c)

    return _make(a.data * a.data.dtype.type(c), (a,), back, "scale")


def relu(a):
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), back, "relu")


def sigmoid(a):
    x = a.data
    with np.errstate(over="ignore"):
        # split by sign to stay finite for large |x|
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)

    def back(g):
        _accum(a, g * s * (1 - s))

    return _make(s, (a,), back, "sigmoid")


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def back(g):
        _accum(a, g * out)

    return _make(out, (a,), back, "exp")


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def back(g):
        _accum(a, g / a.data)

    return _make(out, (a,), back, "log")


# shape ops -------------------------------------------------------------------

def reshape(a, shape):
    def back(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), back, "reshape")


def transpose(a):
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def back(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), back, "transpose")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            _accum(t, piece)

    return _make(out, tuple(tensors), back, "concat")


def take(a, idx):
    """Gather rows of ``a`` (axis 0); output shape is ``idx.shape + a.shape[1:]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0]):
        raise IndexError("take: index out of range")

    def back(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + a.shape[1:]))
        _accum(a, full)

    return _make(a.data[idx], (a,), back, "take")


# linear algebra --------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x, W, b=None):
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is (out, in)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not fit weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"linear: bias {b.shape} does not fit weight {W.shape}")
    x2 = x.data.reshape(-1, W.shape[1])
    out = x2 @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def back(g):
        g2 = g.reshape(-1, W.shape[0])
        _accum(x, (g2 @ W.data).reshape(x.shape))
        _accum(W, g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0))

    return _make(out.reshape(x.shape[:-1] + (W.shape[0],)), parents, back, "linear")


# reductions ------------------------------------------------------------------

def sum_reduce(a, axis=None, keepdims=False):
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean_reduce(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_reduce(a, axis, keepdims), 1.0 / count)


def max_reduce(a, axis):
    """Max along ``axis``; the gradient goes to the first maximal entry only."""
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(a, full)

    return _make(out, (a,), back, "max")


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        _accum(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), back, "softmax")


# normalisation ---------------------------------------------------------------

def _normalize(a, reshaped, axes, eps):
    x = a.data.reshape(reshaped)
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    n = np.prod([x.shape[ax] for ax in axes])

    def back(g):
        g = g.reshape(reshaped)
        gsum = g.sum(axis=axes, keepdims=True)
        gxhat = (g * xhat).sum(axis=axes, keepdims=True)
        dx = inv / n * (n * g - gsum - xhat * gxhat)
        _accum(a, dx.reshape(a.shape))

    return xhat.reshape(a.shape), back


def group_norm(a, groups=8, eps=1e-5):
    """Normalise channel groups (last axis) over all leading positions of one instance."""
    C = a.shape[-1]
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible by {groups} groups")
    out, back = _normalize(a, (-1, groups, C // groups), (0, 2), eps)
    return _make(out, (a,), back, "group_norm")


def instance_norm(a, eps=1e-5):
    """Normalise each channel (last axis) over all leading positions."""
    out, back = _normalize(a, (-1, a.shape[-1]), (0,), eps)
    return _make(out, (a,), back, "instance_norm")


# driver ----------------------------------------------------------------------

def _topo_order(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``.

    When ``params`` (a name -> Tensor mapping) is given, returns a mapping of
    name -> gradient array, zero-filled for parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if params is None:
        return None
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def grad_check(fn, inputs, eps=1e-6):
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps the input tensor(s) to a scalar tensor. Inputs must be 64-bit.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    def call():
        return fn(inputs[0]) if single else fn(*inputs)

    loss = call()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    for t, g_ad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(call().data)
            flat[i] = orig - eps
            down = float(call().data)
            flat[i] = orig
            g_fd = (up - down) / (2 * eps)
            ga = float(g_ad.reshape(-1)[i])
            err = abs(ga - g_fd) / max(1.0, abs(ga), abs(g_fd))
            worst = max(worst, err)
    return worst
