"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every :class:`Tensor` wraps a float64 ``numpy.ndarray``. Operations on tensors
that require gradients record a backward closure and references to their
inputs; :meth:`Tensor.backward` topologically orders the recorded graph and
runs the closures once each, in reverse.

Only the operations the neural process models need are provided. Heavier
primitives (softmax, layer norm, Gaussian log-density) carry fused analytic
backward rules rather than being composed from elementwise pieces.
"""

import contextlib
import math

import numpy as np

from .errors import DegenerateMaskError, DimensionError, DomainError, NumericalError

_GRAD_ENABLED = True
_MAC_COUNTER = None

MASK_SENTINEL = -1e30


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul while active."""

    def __init__(self):
        self.macs = 0


@contextlib.contextmanager
def count_macs():
    """Count matmul multiply-accumulates issued inside the block.

    >>> with count_macs() as c:
    ...     _ = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    >>> c.macs
    24
    """
    global _MAC_COUNTER
    prev = _MAC_COUNTER
    counter = MacCounter()
    _MAC_COUNTER = counter
    try:
        yield counter
    finally:
        _MAC_COUNTER = prev


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
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

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    """Wrap ``data`` as an op output, recording the graph edge when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    return data


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _topological(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate into any existing ``.grad`` array; call
    ``zero_grad`` on parameters between steps. Intermediate gradients are
    released once consumed.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _check_finite(a.data / b.data, "div")

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = _check_finite(np.exp(x.data), "exp")
    return _result(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,))


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x):
    """``log(1 + e^x)`` without overflow for large ``x`` or loss for small ``x``."""
    x = as_tensor(x)
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _result(out, (x,), lambda g: (g * _sigmoid(v),))


# reductions and shape plumbing ---------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / max(n, 1))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def broadcast_to(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(np.broadcast_to(x.data, shape).copy(), (x,),
                   lambda g: (_unbroadcast(g, old),))


def getitem(x, index):
    x = as_tensor(x)

    basic = all(isinstance(i, (slice, int, type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def take(x, indices):
    """Gather rows ``x[indices]`` along the leading axis."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw)


# linear algebra -------------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy broadcasting over leading batch axes.

    A right operand that is a plain matrix is applied to the flattened rows
    of ``a`` in a single GEMM, which is how every weight multiply is issued.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k, m = b.shape
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(*lead, m)
        if _MAC_COUNTER is not None:
            _MAC_COUNTER.macs += a2.shape[0] * k * m

        def bw(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), bw)

    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc
    if _MAC_COUNTER is not None:
        _MAC_COUNTER.macs += int(np.prod(out.shape)) * a.shape[-1]

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


# fused primitives -------------------------------------------------------------

def softmax(x, axis=-1, mask=None, allow_empty=False):
    """Softmax along ``axis`` with max subtraction.

    ``mask`` (boolean, broadcastable to ``x``) marks allowed entries. Blocked
    entries get a ``MASK_SENTINEL`` logit and are then zeroed explicitly, so
    their weight is exactly 0. A row with no allowed entry raises
    :class:`DegenerateMaskError` unless ``allow_empty`` is set, in which case
    the row is all zeros.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    v = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, v.shape)
        v = np.where(mask, v, MASK_SENTINEL)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    if mask is not None:
        e = np.where(mask, e, 0.0)
        s = e.sum(axis=axis, keepdims=True)
        empty = s == 0
        if np.any(empty):
            if not allow_empty:
                raise DegenerateMaskError("a query row has every key blocked")
            s = np.where(empty, 1.0, s)
    else:
        s = e.sum(axis=axis, keepdims=True)
    out = e / s

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: feature size {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), bw)


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_logpdf(y, mean_, var):
    """Elementwise ``log N(y; mean, var)``."""
    y, mean_, var = as_tensor(y), as_tensor(mean_), as_tensor(var)
    if np.any(var.data <= 0):
        raise DomainError("Gaussian variance must be positive")
    r = y.data - mean_.data
    out = -_HALF_LOG_2PI - 0.5 * np.log(var.data) - 0.5 * r * r / var.data

    def bw(g):
        gy = _unbroadcast(-g * r / var.data, y.shape) if y.requires_grad else None
        gm = _unbroadcast(g * r / var.data, mean_.shape) if mean_.requires_grad else None
        gv = None
        if var.requires_grad:
            gv = _unbroadcast(g * (0.5 * r * r / var.data - 0.5) / var.data, var.shape)
        return gy, gm, gv

    return _result(out, (y, mean_, var), bw)


def gaussian_log_likelihood(y, mean_, var):
    """Summed Gaussian log-likelihood of ``y`` under a factorised predictive."""
    return tsum(gaussian_logpdf(y, mean_, var))
