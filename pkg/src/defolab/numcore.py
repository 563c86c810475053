"""
Dense tensors with a reverse-mode tape.

Every op records its parents and a closure mapping the output gradient to
input gradients. Only ops whose inputs require gradients are recorded, so a
forward pass through frozen weights with constant inputs builds no tape.

Values are float64 by default; ``set_default_dtype(np.float32)`` opts into
single precision. After each op the output is checked for NaN/Inf unless the
check is disabled with ``set_finite_checks(False)``.
"""

from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DegenerateVectorError", "NumericError",
    "no_grad", "is_grad_enabled", "set_default_dtype", "get_default_dtype",
    "set_finite_checks", "tensor", "constant",
    "add", "sub", "mul", "neg", "matmul", "transpose", "reshape", "sum", "mean",
    "take", "gather_rows", "where", "concat", "stack", "exp", "log", "gelu",
    "l2_normalize", "softmax", "log_softmax", "layer_norm", "attention",
    "cross_entropy", "backward", "gradcheck",
]

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(ValueError):
    """A vector is too close to zero to normalize."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = os.environ.get("DEFO_RELEASE", "") == ""
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """
    Dense array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values; copied into a fresh array of the default dtype.
    requires_grad : bool
        Leaf tensors with this flag receive ``.grad`` during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        if self.data.size == 0:
            raise ShapeError("tensors must have positive dimension sizes")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> np.ndarray:
        """Flat view of the values."""
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

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


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=_DEFAULT_DTYPE)
    t.requires_grad = False
    t.grad = None
    t.op = "const"
    t._parents = ()
    t._backward = None
    return t


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product with numpy batch semantics; both operands need ndim >= 2."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # fold the batch dims into one product instead of summing per-batch outers
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(count))


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one index along ``axis`` (the axis is dropped)."""
    out = np.take(a.data, index, axis=axis)
    src = a.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(out, (a,), bw, "take")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    src = table.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), bw, "gather_rows")


def where(mask, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Pick ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = constant(a), constant(b)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, a.data, b.data)
    except ValueError:
        raise ShapeError(f"where: shapes {mask.shape}, {a.shape}, {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "where")


def concat(items: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    items = tuple(constant(t) for t in items)
    try:
        out = np.concatenate([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in items])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, items, bw, "concat")


def stack(items: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    items = tuple(constant(t) for t in items)
    try:
        out = np.stack([t.data for t in items], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _result(out, items, bw, "stack")


# ---------------------------------------------------------------------------
# normalization, attention, losses
# ---------------------------------------------------------------------------

def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each vector along ``axis`` to unit Euclidean norm."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    if (norm <= eps).any():
        raise DegenerateVectorError(f"cannot normalize a vector with norm <= {eps}")
    y = a.data / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _result(y, (a,), bw, "l2_normalize")


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(a.data, axis)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return _result(y, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _result(out, (x, gain, bias), bw, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """
    Bidirectional scaled dot-product attention, ``softmax(q kᵀ / √d) v``.

    Operands are ``(..., m, d)`` with identical leading dims.
    """
    if not (q.shape == k.shape and k.shape[:-1] == v.shape[:-1]) or q.ndim < 2:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are incompatible")
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = _softmax_np(np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale)
    out = np.matmul(p, v.data)

    def bw(g):
        dv = np.matmul(np.swapaxes(p, -1, -2), g)
        dp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
        dq = np.matmul(ds, k.data)
        dk = np.matmul(np.swapaxes(ds, -1, -2), q.data)
        return dq, dk, dv

    return _result(out, (q, k, v), bw, "attention")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """
    Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(k,)`` with an integer label or ``(B, k)`` with B labels.
    """
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects (k,) or (B, k) logits, got {logits.shape}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: {y.shape[0]} labels for {n} rows")
    if (y < 0).any() or (y >= k).any():
        raise IndexError(f"label out of range [0, {k})")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        d *= g / n
        return (d[0] if single else d,)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """
    Propagate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto any existing ``.grad``; call ``zero_grad`` between steps.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not on the tape (no input requires grad)")
    order = _topological(root)
    grads = {id(root): np.ones_like(root.data)}
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
            grads[key] = pg if key not in grads else grads[key] + pg


def gradcheck(
    f: Callable[..., Tensor],
    at: Union[Tensor, Sequence[Tensor]],
    step: float = 1e-5,
    coords: Optional[Iterable[np.ndarray]] = None,
) -> float:
    """
    Compare tape gradients with central differences.

    ``f`` is called as ``f(*tensors)`` and must return a scalar. Returns the
    max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` optionally restricts the check to flat indices per tensor.
    """
    tensors = [at] if isinstance(at, Tensor) else list(at)
    saved_flags = [t.requires_grad for t in tensors]
    try:
        for t in tensors:
            t.requires_grad = True
            t.grad = None
        out = f(*tensors)
        backward(out)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
        worst = 0.0
        coord_list = list(coords) if coords is not None else [None] * len(tensors)
        with no_grad():
            for t, a, idx in zip(tensors, analytic, coord_list):
                flat = t.data.reshape(-1)
                a = a.reshape(-1)
                for i in (range(flat.size) if idx is None else idx):
                    orig = flat[i]
                    flat[i] = orig + step
                    hi = f(*tensors).item()
                    flat[i] = orig - step
                    lo = f(*tensors).item()
                    flat[i] = orig
                    num = (hi - lo) / (2 * step)
                    worst = max(worst, abs(a[i] - num) / max(1.0, abs(num)))
        return worst
    finally:
        for t, flag in zip(tensors, saved_flags):
            t.requires_grad = flag
            t.grad = None
