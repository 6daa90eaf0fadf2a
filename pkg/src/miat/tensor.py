"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
output records its parents and a closure mapping the upstream gradient to one
gradient per parent. :meth:`Tensor.backward` walks that tape in reverse
topological order, visiting each node once.

Elementwise ops follow numpy broadcasting; gradients are summed back to the
operand shape.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError

_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check performed on every op output."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def finite_checks_enabled() -> bool:
    return _CHECK_FINITE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if _CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._result(self.data, (), None, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._result(out, (a, b), backward, "div")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._result(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._result(np.minimum(a.data, b.data), (a, b), backward, "minimum")


# -- elementwise unary -------------------------------------------------------

def neg(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` means evaluation mode (identity)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if rng is None or rate == 0.0:
        return x
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._result(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and g.ndim > 2:
                # shared left operand: fold the batch axes into one product
                ga = np.swapaxes(g, -1, -2).reshape(-1, g.shape[-2]).T @ \
                    np.swapaxes(np.broadcast_to(b.data, g.shape[:-2] + b.shape[-2:]), -1, -2).reshape(-1, a.shape[-1])
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch axes into one product
                a_rows = np.broadcast_to(a.data, g.shape[:-2] + a.shape[-2:]).reshape(-1, a.shape[-1])
                gb = a_rows.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), backward, "matmul")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError("transpose needs rank >= 2")
        out = np.swapaxes(x.data, -1, -2)
        return Tensor._result(out, (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,),
                          lambda g: (np.transpose(g, inverse),), "permute")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# -- reductions ----------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / count)


# -- normalisation -------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward, "log_softmax")


def softmax_rows(x) -> Tensor:
    return softmax(x, axis=-1)


def log_softmax_rows(x) -> Tensor:
    return log_softmax(x, axis=-1)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with the biased variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm over an empty feature axis")
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise DimensionError(f"layer_norm gain/bias width must be {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centred * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return Tensor._result(out, (x, gain, bias), backward, "layer_norm")


# -- structural ------------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tensors, backward, "stack")


def getitem(x, key) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back with ``np.add.at``."""
    x = as_tensor(x)
    try:
        out = x.data[key]
    except IndexError as exc:
        raise DimensionError(f"index out of range: {exc}") from None

    basic = _is_basic_index(key)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis or k is None for k in parts)


# -- fused losses ------------------------------------------------------------------

def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``targets``."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return Tensor._result(out, (logits,), lambda g: (g * (p - y),), "bce_with_logits")


# -- serialisation -----------------------------------------------------------------
# Record layout: name (u32 byte length + UTF-8), rank (u32), dims (u32 each),
# data (f64 little-endian, row-major).

def write_tensor(fh: BinaryIO, name: str, value) -> None:
    arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        from .errors import CheckpointError
        raise CheckpointError("unexpected end of file while reading a tensor record")
    return buf


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, n).decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, data.reshape(dims)


def write_tensors(fh: BinaryIO, named: Iterable[tuple[str, object]]) -> None:
    named = list(named)
    fh.write(struct.pack("<I", len(named)))
    for name, value in named:
        write_tensor(fh, name, value)


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = read_tensor(fh)
        out[name] = arr
    return out
