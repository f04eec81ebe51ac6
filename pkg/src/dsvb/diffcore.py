"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Graphs are built on the fly: every differentiable op returns a ``Tensor`` that
remembers its parents and a closure propagating the output gradient back to
them.  ``Tensor.backward`` walks the graph once in reverse topological order.
"""

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import DomainError, NonScalarOutput, NumericalDivergence, ShapeMismatch

_grad_enabled = True

SOFTPLUS_LINEAR_ABOVE = 30.0


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else self.values.item()

    def detach(self):
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every tensor reachable from this scalar output."""
        if self.values.size != 1:
            raise NonScalarOutput(f"backward needs a scalar output, got shape {self.shape}")
        global _live
        order = topological_order(self)
        # only tensors recorded in the graph receive gradients, whatever
        # their requires_grad flag says now
        _live = {id(n) for n in order}
        self.grad = np.ones_like(self.values)
        try:
            for node in reversed(order):
                if node._backward is not None and node.grad is not None:
                    node._backward(node.grad)
        finally:
            _live = set()
        # the graph is consumed: release closures so intermediates can be freed
        for node in order:
            node._backward = None
            node._parents = ()

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(output):
    """Nodes reachable from ``output``, each listed after all of its inputs."""
    order, visited = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


_live = set()


def _wants(t):
    return id(t) in _live


def _accumulate(t, g):
    if id(t) not in _live:
        return
    if t.grad is None:
        # gradients are never updated in place, so sharing the array is safe
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(values, parents, backward, op):
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# binary ops ------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.values + b.values, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.values - b.values, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "elementwise_mul")

    def backward(g):
        if _wants(a):
            _accumulate(a, _unbroadcast(g * b.values, a.shape))
        if _wants(b):
            _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _result(a.values * b.values, (a, b), backward, "elementwise_mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "elementwise_div")
    if np.any(b.values == 0):
        raise DomainError("elementwise_div: division by zero")
    out_values = a.values / b.values

    def backward(g):
        if _wants(a):
            _accumulate(a, _unbroadcast(g / b.values, a.shape))
        if _wants(b):
            _accumulate(b, _unbroadcast(-g * out_values / b.values, b.shape))

    return _result(out_values, (a, b), backward, "elementwise_div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            _accumulate(a, g * b.values)
            _accumulate(b, g * a.values)
            return
        if _wants(a):
            ga = np.outer(g, b.values) if b.ndim == 1 else g @ b.values.T
            _accumulate(a, ga)
        if _wants(b):
            gb = np.outer(a.values, g) if a.ndim == 1 else a.values.T @ g
            _accumulate(b, gb)

    return _result(a.values @ b.values, (a, b), backward, "matmul")


# unary ops -------------------------------------------------------------------

def exp(a):
    a = as_tensor(a)
    out_values = np.exp(a.values)

    def backward(g):
        _accumulate(a, g * out_values)

    return _result(out_values, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    if np.any(~(a.values > 0)):
        raise DomainError("log: input must be strictly positive")

    def backward(g):
        _accumulate(a, g / a.values)

    return _result(np.log(a.values), (a,), backward, "log")


def tanh(a):
    a = as_tensor(a)
    out_values = np.tanh(a.values)

    def backward(g):
        _accumulate(a, g * (1.0 - out_values * out_values))

    return _result(out_values, (a,), backward, "tanh")


def _sigmoid(x):
    return expit(x)


def sigmoid(a):
    a = as_tensor(a)
    out_values = _sigmoid(a.values)

    def backward(g):
        _accumulate(a, g * out_values * (1.0 - out_values))

    return _result(out_values, (a,), backward, "sigmoid")


def _softplus(x):
    linear = x > SOFTPLUS_LINEAR_ABOVE
    return np.where(linear, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_ABOVE))))


def softplus(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, g * _sigmoid(a.values))

    return _result(_softplus(a.values), (a,), backward, "softplus")


def square(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, 2.0 * g * a.values)

    return _result(a.values * a.values, (a,), backward, "square")


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)

    def backward(g):
        _accumulate(a, g * inside)

    return _result(np.clip(a.values, lo, hi), (a,), backward, "clip")


# structural ops --------------------------------------------------------------

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if _wants(t):
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _result(out_values, tuple(tensors), backward, "concat")


def slice_(a, start, stop, axis=-1):
    """Contiguous slice ``[start:stop]`` along one axis."""
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatch(f"slice: [{start}:{stop}] out of range for axis of size {n}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.values)
        full[idx] = g
        _accumulate(a, full)

    return _result(a.values[idx], (a,), backward, "slice")


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(out_values, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out_values = a.values.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _result(out_values, (a,), backward, "mean")


OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "elementwise_div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "square": square,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "sum": tsum,
    "mean": mean,
}


def apply_op(op, *inputs, **kwargs):
    """Dispatch a named op, e.g. ``apply_op("matmul", a, b)``."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


def grad_check(f, point, step=1e-4):
    """Largest relative gap between the analytic gradient and central differences.

    ``f`` maps a Tensor to a Tensor; non-scalar outputs are summed.  The
    relative error per coordinate is ``|a - c| / max(|a|, |c|, 1e-8)``.
    """
    x0 = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)

    def scalar(v):
        out = f(v)
        return out if out.size == 1 else tsum(out)

    x = Tensor(x0.copy(), requires_grad=True)
    scalar(x).backward()
    analytic = np.zeros_like(x0) if x.grad is None else x.grad

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp, xm = x0.copy(), x0.copy()
            xp.reshape(-1)[i] += step
            xm.reshape(-1)[i] -= step
            flat[i] = (scalar(Tensor(xp)).item() - scalar(Tensor(xm)).item()) / (2 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise NumericalDivergence(f"non-finite values in {what}")
