"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every tensor gets a monotonically increasing node id at creation. An op
result records its inputs and a closure mapping the output gradient to input
gradients. ``backward`` walks the nodes reachable from the loss in reverse
creation order, so each node is visited exactly once after all of its
consumers.
"""
from __future__ import annotations

import itertools
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "matmul",
    "concat",
    "index",
    "reshape",
    "transpose",
    "mean",
    "sum",
    "gelu",
    "softmax",
    "rmsnorm",
    "layernorm",
    "sqrt",
    "square",
    "broadcast",
    "forward_op",
    "backward",
    "gradcheck",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_node_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was called on an invalid or already consumed graph."""


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


class no_grad:
    """Context manager that stops graph recording on the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _local.enabled = False
        return self

    def __exit__(self, *exc):
        _local.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_inputs", "_backward", "_node_id", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._inputs: tuple = ()
        self._backward = None
        self._node_id = next(_node_ids)
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, inputs: Sequence["Tensor"] | None = None) -> None:
        backward(self, inputs)


def _raise_scalar(shape):
    raise ShapeError(f"item: expected a single-element tensor, got shape {shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, inputs: tuple, grad_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._node_id = next(_node_ids)
    out._consumed = False
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out._inputs = inputs if track else ()
    out._backward = grad_fn if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), grad_fn)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; the derivative at exactly zero is taken as 0."""
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(x.data)

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _result(out, "sqrt", (x,), grad_fn)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def grad_fn(g):
        return (2.0 * x.data * g,)

    return _result(x.data * x.data, "square", (x,), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, "gelu", (x,), grad_fn)


# contraction -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    ``b`` is either 2-D (a weight shared over all leading dims of ``a``) or has
    exactly the same leading dims as ``a``. Nothing else is broadcast.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, "matmul", (a, b), grad_fn)


# structural --------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != ax and t.shape[i] != ref.shape[i] for i in range(ref.ndim)
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, grad_fn)


def _is_basic_key(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in key)


def index(x: Tensor, key) -> Tensor:
    """Slice or gather with any numpy index; repeated indices accumulate grads."""
    x = _as_tensor(x)
    try:
        out = x.data[key]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None
    basic = _is_basic_key(key)
    out = np.array(out, dtype=np.float64)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(out, "slice", (x,), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _result(out, "reshape", (x,), grad_fn)


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, axes), "transpose", (x,), grad_fn)


def broadcast(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None

    def grad_fn(g):
        return (_unbroadcast(g, x.shape),)

    return _result(out, "broadcast", (x,), grad_fn)


# reductions --------------------------------------------------------------


def _expand_reduced(g, axes, keepdims, shape):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)

    def grad_fn(g):
        return (np.array(_expand_reduced(g, axes, keepdims, x.shape)),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), "sum", (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def grad_fn(g):
        return (_expand_reduced(g, axes, keepdims, x.shape) / n,)

    return _result(np.mean(x.data, axis=axes, keepdims=keepdims), "mean", (x,), grad_fn)


# normalisation -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), grad_fn)


def _check_gain(op, x, gain):
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"{op}: gain shape {gain.shape} does not match last axis of {x.shape}")


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-8) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    _check_gain("rmsnorm", x, gain)
    r = np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data / r

    def grad_fn(g):
        gh = g * gain.data
        gx = (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)) / r
        gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg

    return _result(xhat * gain.data, "rmsnorm", (x, gain), grad_fn)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    _check_gain("layernorm", x, gain)
    _check_gain("layernorm", x, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    std = np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xhat = xc / std

    def grad_fn(g):
        gh = g * gain.data
        gx = (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)
        ) / std
        d = x.shape[-1]
        return gx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return _result(xhat * gain.data + bias.data, "layernorm", (x, gain, bias), grad_fn)


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": lambda x, key: index(x, key),
    "reshape": lambda x, shape: reshape(x, shape),
    "transpose": lambda x, axes=None: transpose(x, axes),
    "mean": mean,
    "sum": sum,
    "gelu": gelu,
    "softmax": softmax,
    "rmsnorm": rmsnorm,
    "layernorm": layernorm,
    "sqrt": sqrt,
    "square": square,
    "broadcast": lambda x, shape: broadcast(x, shape),
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply an op by name, e.g. ``forward_op("softmax", [x], axis=-1)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)


# differentiation ---------------------------------------------------------


def backward(loss: Tensor, inputs: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaves listed in ``inputs`` that the loss does not depend on get a zero
    gradient. The graph is released afterwards; a second call raises.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not depend on any tensor requiring grad")

    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        if t._consumed:
            raise GraphError("backward: graph already consumed")
        reachable[id(t)] = t
        stack.extend(i for i in t._inputs if i.requires_grad)

    grads = {id(loss): np.ones_like(loss.data)}
    for t in sorted(reachable.values(), key=lambda n: n._node_id, reverse=True):
        g = grads.pop(id(t), None)
        if not t._inputs:
            if g is not None:
                t.grad = np.array(g) if t.grad is None else t.grad + g
            continue
        if g is not None:
            for inp, ig in zip(t._inputs, t._backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
        t._backward = None
        t._inputs = ()
        t._consumed = True
    loss._consumed = True

    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def gradcheck(f: Callable[..., Tensor], point: Sequence, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps one tensor per entry of ``point`` to a scalar tensor. The error
    per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"gradcheck: step h={h} outside [1e-7, 1e-3]")
    leaves = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in point]
    loss = f(*leaves)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ShapeError("gradcheck: f must return a scalar tensor")
    backward(loss, leaves)

    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        analytic = leaf.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = f(*leaves).data.item()
                flat[i] = orig - h
                down = f(*leaves).data.item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]), abs(numeric))
            worst = max(worst, err)
    return worst
