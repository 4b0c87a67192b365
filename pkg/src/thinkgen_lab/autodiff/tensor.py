"""Reverse-mode automatic differentiation over dense numpy arrays.

Every ``Tensor`` wraps an immutable ``numpy.ndarray``. Operations build a
graph whose nodes carry a backward rule mapping the output gradient to one
gradient per parent. Node ids come from a global counter, so creation order
is a valid topological order and ``backward`` simply walks ancestors by
descending id.

Broadcasting rules per op kind:

* ``add``/``sub``/``mul``/``div``/``minimum``/``where``: numpy broadcasting;
  gradients are summed back to each input's shape.
* ``matmul``: both inputs at least 2-D, ``(..., n, k) @ (..., k, m)`` with
  numpy broadcasting over the leading batch dimensions.
* ``concat``: all inputs share every dimension except ``axis``.
* everything else: elementwise or along an explicit ``axis``.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, NumericsError, ShapeError

_ids = itertools.count()

_config = {
    "grad_enabled": True,
    "checked": True,
    "dtype": np.float64,
}

_GELU_C = float(np.sqrt(2.0 / np.pi))


def set_checked(flag: bool) -> None:
    """Toggle rejection of non-finite values at tensor creation."""
    _config["checked"] = bool(flag)


def set_default_dtype(dtype) -> None:
    """Switch between float64 (default, used by all tests) and float32."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _config["dtype"] = dtype.type


def default_dtype():
    return _config["dtype"]


@contextlib.contextmanager
def no_grad():
    prev = _config["grad_enabled"]
    _config["grad_enabled"] = False
    try:
        yield
    finally:
        _config["grad_enabled"] = prev


@contextlib.contextmanager
def checked(flag: bool = True):
    prev = _config["checked"]
    _config["checked"] = flag
    try:
        yield
    finally:
        _config["checked"] = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _config["checked"] and data.size and not np.isfinite(data).all():
        raise NumericsError(f"non-finite values produced by {op!r}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "_backward", "op", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_config["dtype"], copy=True)
        _check_finite(arr, "leaf")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        if data.dtype != _config["dtype"]:
            data = data.astype(_config["dtype"])
        _check_finite(data, op)
        data.setflags(write=False)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.id = next(_ids)
        out.name = None
        track = _config["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "div")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return Tensor._result(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return Tensor._result(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- elementwise unary ------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise ContractError("power only supports constant exponents")
    p = float(exponent)
    if p == 2.0:
        return Tensor._result(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,), "pow")

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._result(a.data**p, (a,), bw, "pow")


def abs_(a) -> Tensor:
    """Absolute value; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._result(out, (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x  # explicit products: float ** int goes through slow pow()
    u = _GELU_C * (x + 0.044715 * x2 * x)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return Tensor._result(out, (a,), bw, "gelu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out**2),), "tanh")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if n else np.zeros(())

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "mean")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims incompatible, {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


# -- normalisation & probability ----------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction: ``exp(x - max) / sum(exp(x - max))``."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    """``x - max - log(sum(exp(x - max)))``."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), bw, "log_softmax")


def layer_norm(a, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a = as_tensor(a)
    parents = [a]
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
    d = a.shape[-1]
    for p in parents[1:]:
        if p.shape != (d,):
            raise ShapeError(f"layer_norm: affine params must have shape ({d},), got {p.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def bw(g):
        dxhat = g * gamma.data if gamma is not None else g
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return Tensor._result(out, parents, bw, "layer_norm")


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        gd = g * 2.0 * diff / n
        return gd, -gd

    return Tensor._result(np.asarray((diff**2).mean()), (a, b), bw, "mse")


# -- indexing & shape -------------------------------------------------------

def gather(a, index, axis: int = -1) -> Tensor:
    """``take_along_axis``: pick ``a[..., index[...], ...]`` along ``axis``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != a.ndim:
        raise ShapeError(f"gather: index ndim {index.ndim} != input ndim {a.ndim}")
    out = np.take_along_axis(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        if index.shape[axis] == 1:
            np.put_along_axis(full, index, g, axis=axis)
        else:
            grids = list(np.indices(index.shape, sparse=True))
            grids[axis % a.ndim] = index
            np.add.at(full, tuple(grids), g)
        return (full,)

    return Tensor._result(out, (a,), bw, "gather")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._result(table.data[ids], (table,), bw, "embedding")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out), (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


# -- backward pass ------------------------------------------------------------

@dataclass
class GradTape:
    """Result of one backward pass.

    ``nodes`` holds every requires-grad ancestor of the root in creation
    order; ``grads`` maps node id to its gradient. Intermediate gradients are
    dropped unless ``retain`` was requested.
    """

    nodes: list[Tensor] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.grads.get(t.id)

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self.grads


def backward(root: Tensor, retain: bool = False) -> GradTape:
    """Propagate d(root)/d(node) to every requires-grad ancestor.

    Leaf tensors get their ``.grad`` overwritten (never accumulated), so
    calling ``backward`` twice on the same graph yields identical gradients.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar-shaped, got {root.shape}")
    tape = GradTape()
    if not root.requires_grad:
        return tape
    nodes: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.id in nodes:
            continue
        nodes[n.id] = n
        stack.extend(p for p in n.parents if p.requires_grad and p.id not in nodes)
    order = sorted(nodes)
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for nid in reversed(order):
        n = nodes[nid]
        g = grads.get(nid)
        if g is None or n._backward is None:
            continue
        pgs = n._backward(g)
        for p, pg in zip(n.parents, pgs):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
        if not retain and nid != root.id:
            del grads[nid]
    for n in nodes.values():
        if n.is_leaf:
            n.grad = grads.get(n.id, np.zeros_like(n.data))
    tape.nodes = [nodes[i] for i in order]
    tape.grads = grads
    return tape


def grads_of(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
