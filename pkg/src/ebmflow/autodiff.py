"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records onto an implicit tape (the node graph) unless
gradients are globally disabled via `no_grad()`. The backward pass walks
nodes in reverse creation order, which is always a valid topological
order, so each node is visited exactly once and accumulation order is
deterministic. All arithmetic is float64; any operation producing a
non-finite value raises immediately, naming the offending node.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "as_tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "log_abs",
    "sqrt",
    "absval",
    "tanh",
    "sigmoid",
    "softplus",
    "leaky_relu",
    "atan2",
    "softmax",
    "minimum_const",
    "maximum_const",
    "reshape",
    "concat",
    "narrow",
    "take_columns",
    "tsum",
    "tmean",
    "norm",
    "cosine_similarity",
    "affine",
    "logsumexp",
    "standard_normal_logpdf",
    "evaluate_with_gradients",
    "finite_difference_check",
]

_uid = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (values only, no graph)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; message carries the node identity."""


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._uid = next(_uid)

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    # ---- backward pass ---------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's `.grad`.

        Only valid for scalar outputs; raises otherwise.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        nodes = _reachable(self)
        nodes.sort(key=lambda t: t._uid, reverse=True)
        grads = {self._uid: np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(node._uid, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                # Pass-through gradients may alias g or be views; copy before
                # storing so in-place accumulation cannot corrupt siblings.
                if pg is g or pg.base is not None:
                    pg = pg.copy()
                buf = grads.get(parent._uid)
                if buf is None:
                    grads[parent._uid] = pg
                else:
                    buf += pg


def _reachable(root: Tensor):
    seen = set()
    out = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node._uid in seen:
            continue
        seen.add(node._uid)
        out.append(node)
        stack.extend(node._parents)
    return out


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def constant(value) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(value)


def _make(data: np.ndarray, parents, op: str, backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by node '{op}'")
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    else:
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---- elementwise binary ops ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), "mul", backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(data, (a, b), "div", backward)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects rank-2 operands, got {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), "matmul", backward)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    data = np.arctan2(y.data, x.data)
    denom = x.data * x.data + y.data * y.data

    def backward(g):
        return (
            _unbroadcast(g * x.data / denom, y.data.shape),
            _unbroadcast(-g * y.data / denom, x.data.shape),
        )

    return _make(data, (y, x), "atan2", backward)


# ---- elementwise unary ops ------------------------------------------------


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make(data, (a,), "exp", lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(a.data)
    return _make(data, (a,), "log", lambda g: (g / a.data,))


def log_abs(a: Tensor) -> Tensor:
    """log|x|; gradient is 1/x (valid away from zero)."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(np.abs(a.data))
    return _make(data, (a,), "log_abs", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _make(data, (a,), "sqrt", lambda g: (g * 0.5 / data,))


def absval(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _make(data, (a,), "tanh", lambda g: (g * (1.0 - data * data),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(data, (a,), "sigmoid", lambda g: (g * data * (1.0 - data),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(data, (a,), "softplus", lambda g: (g * sig,))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, slope * a.data)
    return _make(data, (a,), "leaky_relu", lambda g: (np.where(mask, g, slope * g),))


def minimum_const(a: Tensor, cap: float) -> Tensor:
    """Elementwise min(x, cap); gradient passes only where x <= cap."""
    a = as_tensor(a)
    mask = a.data <= cap
    data = np.where(mask, a.data, cap)
    return _make(data, (a,), "minimum_const", lambda g: (np.where(mask, g, 0.0),))


def maximum_const(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= floor
    data = np.where(mask, a.data, floor)
    return _make(data, (a,), "maximum_const", lambda g: (np.where(mask, g, 0.0),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (a,), "softmax", backward)


# ---- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), "reshape", lambda g: (g.reshape(a.data.shape),))


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    widths = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _make(data, tuple(parts), "concat", backward)


def narrow(a: Tensor, start: int, length: int, axis: int = -1) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, starting at `start`."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        return (buf,)

    return _make(data, (a,), "narrow", backward)


def take_columns(a: Tensor, idx) -> Tensor:
    """Select (possibly non-contiguous) columns of a rank-2 tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[:, idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (slice(None), idx), g)
        return (buf,)

    return _make(data, (a,), "take_columns", backward)


# ---- reductions -------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(data, (a,), "sum", backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), a.data.shape).copy(),)

    return _make(data, (a,), "mean", backward)


# ---- composites -------------------------------------------------------------


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along `axis`."""
    return sqrt(tsum(mul(a, a), axis=axis))


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    dot = tsum(mul(a, b), axis=axis)
    return div(dot, mul(norm(a, axis=axis), norm(b, axis=axis)))


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = constant(a.data.max(axis=axis, keepdims=True))
    summed = tsum(exp(sub(a, shift)), axis=axis)
    return add(log(summed), constant(np.squeeze(shift.data, axis=axis)))


def standard_normal_logpdf(x: Tensor, axis: int = -1) -> Tensor:
    """Rowwise log N(x | 0, I) along `axis`."""
    x = as_tensor(x)
    d = x.data.shape[axis]
    quad = tsum(mul(x, x), axis=axis)
    return sub(mul(constant(-0.5), quad), constant(0.5 * d * np.log(2.0 * np.pi)))


# ---- differentiation utilities ----------------------------------------------


def evaluate_with_gradients(f, inputs):
    """Evaluate a scalar tensor function and return (value, gradients).

    `inputs` is a list of Tensors; each is marked differentiable and its
    gradient buffer reset. Gradients are returned in input order; an input
    that the function never touches gets a zero gradient of its shape.
    """
    tensors = [as_tensor(x) for x in inputs]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = f(*tensors)
    if not isinstance(out, Tensor):
        raise TypeError("function under differentiation must return a Tensor")
    if out.data.size != 1:
        raise ValueError(
            f"gradient requested for non-scalar output of shape {out.data.shape}"
        )
    out.backward()
    grads = []
    for t in tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient in backward pass")
        grads.append(g)
    return out, grads


def finite_difference_check(f, point, step: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| / (|analytic| + 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.asarray(as_tensor(point).data, dtype=np.float64)
    if np.any((x0 + step) - x0 == 0.0) or np.any(x0 - (x0 - step) == 0.0):
        raise ValueError("step underflows at this point; increase it")
    _, grads = evaluate_with_gradients(f, [Tensor(x0.copy())])
    analytic = grads[0]
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + step
            hi = f(Tensor(bumped.reshape(x0.shape))).item()
            bumped[i] = flat[i] - step
            lo = f(Tensor(bumped.reshape(x0.shape))).item()
            num_flat[i] = (hi - lo) / (2.0 * step)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)
    return float(rel.max())
