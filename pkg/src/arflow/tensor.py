"""Reverse-mode automatic differentiation over dense float64 arrays.

Every tensor produced by an op carries a monotonically increasing creation
id, references to its parents, and a closure that maps the output adjoint to
parent adjoints.  backward() replays the recorded subgraph in exact reverse
creation order, so gradient accumulation order (and therefore the exact
floating-point result) is deterministic run to run.

Any non-finite forward output or backward adjoint raises NonFiniteError
naming the op; there are no silent NaNs.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

_NODE_COUNTER = itertools.count()
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the context (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn", "_nid")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._backward_fn = None
        self._nid = next(_NODE_COUNTER)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag}, op={self.op})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents, backward_fn) -> Tensor:
    """Record one op result, checking the forward value for non-finites."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite forward value in op '{op}'")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum an adjoint down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"op '{op}': shapes {a.shape} and {b.shape} do not broadcast") from e


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a.data, b.data, "add")
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a.data, b.data, "sub")
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a.data, b.data, "mul")
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make("mul", out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes_ok(a.data, b.data, "div")
    if np.any(b.data == 0.0):
        raise DomainError("op 'div': zero denominator")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make("div", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("op 'matmul': operands must have rank >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"op 'matmul': inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("op 'log': operand must be strictly positive")
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make("log", out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("op 'sqrt': operand must be nonnegative")
    out = np.sqrt(a.data)

    def bw(g):
        return (g / (2.0 * out),)

    return _make("sqrt", out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable logistic, no overflow on either tail
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bw(g):
        return (g * _sigmoid(a.data),)

    return _make("softplus", out, (a,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * d,)

    return _make("gelu", out, (a,), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * a.data.ndim)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis]))

    def bw(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * a.data.ndim)
        return (np.broadcast_to(gg, a.data.shape) / count,)

    return _make("mean", np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"op 'reshape': cannot view {a.data.shape} as {shape}") from e

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _make("reshape", out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(ax % a.data.ndim for ax in axes)
    inv = np.argsort(axes)
    out = a.data.transpose(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make("transpose", out, (a,), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"op 'broadcast': cannot broadcast {a.data.shape} to {shape}") from e

    def bw(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make("broadcast", out, (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (the 'slice' op)."""
    a = _as_tensor(a)
    axis = axis % a.data.ndim
    if start < 0 or length < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"op 'slice': window [{start}, {start + length}) outside extent "
            f"{a.data.shape[axis]} on axis {axis}"
        )
    idx = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.data.ndim))
    out = a.data[idx].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make("slice", out, (a,), bw)


def flip(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    axis = axis % a.data.ndim
    out = np.flip(a.data, axis=axis).copy()

    def bw(g):
        return (np.flip(g, axis=axis).copy(),)

    return _make("flip", out, (a,), bw)


def gather(a: Tensor, axis: int, indices) -> Tensor:
    """Select rows along an axis by integer index (grad scatters back)."""
    a = _as_tensor(a)
    axis = axis % a.data.ndim
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("op 'gather': indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[axis]):
        raise ShapeError(f"op 'gather': index outside extent {a.data.shape[axis]} on axis {axis}")
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, tuple(slice(None) if i != axis else idx for i in range(a.data.ndim)), g)
        return (full,)

    return _make("gather", out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("op 'concat': empty operand list")
    axis = axis % tensors[0].data.ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("op 'concat': operand shapes incompatible") from e
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(piece.copy() for piece in np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), bw)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with optional additive mask.

    The mask is a constant array (may contain -inf for excluded slots); a row
    with every slot masked is a domain error rather than a NaN.
    """
    a = _as_tensor(a)
    scores = a.data if mask is None else a.data + mask
    top = np.max(scores, axis=-1, keepdims=True)
    if not np.isfinite(top).all():
        raise DomainError("op 'softmax': a row is fully masked")
    e = np.exp(scores - top)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / denom

    def bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make("softmax", out, (a,), bw)


def rmsnorm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by gain."""
    a, gain = _as_tensor(a), _as_tensor(gain)
    if a.data.ndim == 0 or a.data.shape[-1] == 0:
        raise ShapeError("op 'rmsnorm': zero-length feature axis")
    if gain.data.shape != a.data.shape[-1:]:
        raise ShapeError(
            f"op 'rmsnorm': gain shape {gain.data.shape} does not match feature dim {a.data.shape[-1:]}"
        )
    ms = mean(mul(a, a), axis=-1, keepdims=True)
    return mul(div(a, sqrt(add(ms, Tensor(eps)))), gain)


def backward(loss: Tensor):
    """Accumulate dLoss/dT into .grad for every requires_grad tensor feeding loss.

    Visits recorded nodes in exact reverse creation order; repeated calls
    accumulate unless grads are zeroed.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    stack, seen, nodes = [loss], {id(loss)}, []
    while stack:
        t = stack.pop()
        nodes.append(t)
        for p in t._parents:
            if id(p) not in seen and p.requires_grad:
                seen.add(id(p))
                stack.append(p)
    nodes.sort(key=lambda t: t._nid, reverse=True)

    adjoint = {id(loss): np.ones((), dtype=np.float64)}
    for t in nodes:
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        if t._backward_fn is None:
            continue
        parent_grads = t._backward_fn(g)
        for p, pg in zip(t._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(f"non-finite backward value in op '{t.op}'")
            prev = adjoint.get(id(p))
            adjoint[id(p)] = pg if prev is None else prev + pg


# registry: op kind -> callable, the generic dispatch surface
OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "sub": sub,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "softplus": softplus,
    "neg": neg,
    "sum": sum_,
    "mean": mean,
    "slice": narrow,
    "concat": concat,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "sqrt": sqrt,
    "gelu": gelu,
    "flip": flip,
    "gather": gather,
    "softmax": softmax,
    "rmsnorm": rmsnorm,
}


def apply(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch an op by kind name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind '{kind}'") from None
    return fn(*args, **kwargs)
