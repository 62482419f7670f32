"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

Every operation returns a new :class:`Tensor`.  When any input requires a
gradient the result keeps references to its inputs together with a closure
mapping the output gradient to input gradients; :func:`backward` walks that
graph once in reverse topological order.

Non-finite values are rejected at every op boundary unless disabled with
:func:`finite_checks`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _checks_enabled() -> bool:
    return getattr(_state, "finite", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    prev = _checks_enabled()
    _state.finite = enabled
    try:
        yield
    finally:
        _state.finite = prev


def set_finite_checks(enabled: bool) -> None:
    _state.finite = enabled


def _check_finite(data: np.ndarray, op: str) -> None:
    if _checks_enabled() and not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite value encountered")


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item()) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, keepdims=True):
        return mean_last(self, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# --- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    if _checks_enabled() and not np.all(b.data):
        raise NumericError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "matmul")


# --- elementwise unary --------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if _checks_enabled() and np.any(a.data <= 0):
        raise NumericError("log: argument must be positive")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if _checks_enabled() and np.any(a.data <= 0):
        raise NumericError("sqrt: argument must be positive")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def where(cond, a, b) -> Tensor:
    """Select entries of ``a`` where ``cond`` holds, else ``b`` (bitwise copies)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        shape = np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"where: shapes {cond.shape}, {a.shape}, {b.shape} do not conform") from None
    out = np.where(cond, a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(np.broadcast_to(out, shape).copy() if out.shape != shape else out, (a, b), bw, "where")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --- reductions over the last axis --------------------------------------------

def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def mean_last(a, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    n = a.shape[-1]
    out = a.data.mean(axis=-1, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = g[..., None]
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(out, (a,), bw, "mean")


def var_last(a, keepdims: bool = True) -> Tensor:
    """Population variance over the last axis."""
    a = as_tensor(a)
    n = a.shape[-1]
    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    out = (centered * centered).mean(axis=-1, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = g[..., None]
        return (g * (2.0 / n) * centered,)

    return _node(out, (a,), bw, "var")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a) -> Tensor:
    """Mean over every entry, returning a scalar."""
    a = as_tensor(a)
    return mul(sum_(a), 1.0 / a.data.size)


# --- structural ---------------------------------------------------------------

def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis; ``index`` may have any shape."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for shape {a.shape}")
    out = a.data[index]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _node(out, (a,), bw, "gather_rows")


def scatter_rows(a, index, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at ``index`` in a zero tensor with ``n_rows`` rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (a.shape[0],):
        raise DimensionError(f"scatter_rows: index shape {index.shape} vs rows {a.shape}")
    if len(np.unique(index)) != len(index):
        raise ContractError("scatter_rows: indices must be unique")
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise DimensionError(f"scatter_rows: index out of range for {n_rows} rows")
    out = np.zeros((n_rows,) + a.shape[1:])
    out[index] = a.data
    return _node(out, (a,), lambda g: (g[index],), "scatter_rows")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} do not conform") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, ts, bw, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, _expand_shape(t.shape, axis)) for t in ts], axis=axis)


def _expand_shape(shape, axis):
    shape = list(shape)
    if axis < 0:
        axis += len(shape) + 1
    shape.insert(axis, 1)
    return tuple(shape)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    basic = _is_basic_index(key)

    def bw(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[key] = g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return _node(out, (a,), bw, "slice")


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis or k is None for k in parts)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "mean": mean_last,
    "var": var_last,
    "sqrt": sqrt,
    "clip": clip,
    "where": where,
    "sum": sum_,
    "gather_rows": gather_rows,
    "scatter_rows": scatter_rows,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# --- backward pass ------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Leaf gradients accumulate across calls; interior gradients are overwritten.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- optimizer ----------------------------------------------------------------

class Adam:
    """Bias-corrected adaptive-moment updates applied in place."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"v.{name}"], dtype=np.float64)
        self.t = int(t)
