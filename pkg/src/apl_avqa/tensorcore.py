"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major :class:`numpy.ndarray`.  Operations build a
graph of parent links; :func:`backward` linearises that graph into a
:class:`Tape` (topological order) and replays it in reverse exactly once.

Broadcasting is deliberately narrow: an elementwise operand may be a scalar
or have a shape that is a suffix of the other operand's shape (a bias over
rows, a weight over a batch).  ``matmul`` additionally broadcasts leading
batch dimensions the way :func:`numpy.matmul` does.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "GradCheckReport",
    "tensor",
    "zeros",
    "ones",
    "precision",
    "debug_checks",
    "get_default_dtype",
    "matmul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "l2_normalize_lastdim",
    "layer_norm_lastdim",
    "concat",
    "stack",
    "take_rows",
    "backward",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


def _debug_enabled() -> bool:
    return getattr(_local, "debug", True)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (thread-local)."""
    old = get_default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = old


@contextlib.contextmanager
def debug_checks(enabled: bool):
    """Toggle the after-every-op NaN/Inf check (thread-local, on by default)."""
    old = _debug_enabled()
    _local.debug = bool(enabled)
    try:
        yield
    finally:
        _local.debug = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            floating = isinstance(data, (np.ndarray, np.generic)) and data.dtype.kind == "f"
            dtype = data.dtype if floating else get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators ----------------------------------------------------------
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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def mT(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def backward(self, leaves: Iterable["Tensor"] | None = None) -> None:
        backward(self, leaves)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or get_default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or get_default_dtype()), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _debug_enabled() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- elementwise arithmetic ---------------------------------------------------


def _check_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} are not suffix-compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(), dtype=grad.dtype)
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return _result(y, (a,), lambda g: (-g * y * y,), "reciprocal")


# -- unary nonlinearities -----------------------------------------------------


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _result(y, (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,), "relu")


# -- reductions and shape ops -------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if g.ndim else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return _result(y, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    y = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def bw(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return _result(y, (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    y = a.data.reshape(shape)
    return _result(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    y = np.array(a.data[index])
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(y, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    y = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(y, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    y = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(y, tensors, bw, "stack")


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table by integer ids of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("row ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"row id out of range for table with {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "take_rows")


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(y, (a, b), bw, "matmul")


# -- fused last-axis primitives ------------------------------------------------


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


def l2_normalize_lastdim(x: Tensor, eps: float = 1e-8) -> Tensor:
    """x / (||x|| + eps) along the last axis; a zero row maps to zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = norm + eps
    y = x.data / denom

    def bw(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - x.data * dot / (denom * denom * safe),)

    return _result(y, (x,), bw, "l2_normalize")


def layer_norm_lastdim(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance along the last axis (no affine part)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (x,), bw, "layer_norm")


# -- reverse pass ---------------------------------------------------------------


@dataclass
class Tape:
    """Operations reachable from a root, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack_.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, leaves: Iterable[Tensor] | None = None) -> Tape:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``leaves`` that the root does not depend on receive a zero gradient.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    return tape


# -- finite-difference checking ------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[int, int] | None = None

    def as_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "pass": self.passed,
            "n_checked": self.n_checked,
            "worst": list(self.worst) if self.worst else None,
        }


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    n_samples: int | None = None,
    rng: np.random.Generator | None = None,
    grads: Sequence[np.ndarray] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` recomputes the scalar loss from the current contents of ``params``
    (which are perturbed in place and restored).  ``grads`` overrides the
    analytic gradients, which is how a deliberately wrong gradient is fed in.
    Relative error per coordinate is ``|a - n| / max(|a| + |n|, floor)``.
    Mismatches are reported, never raised.
    """
    params = list(params)
    if grads is None:
        for p in params:
            p.grad = None
        backward(f(), params)
        grads = [p.grad.copy() for p in params]
    flat = [(pi, ci) for pi, p in enumerate(params) for ci in range(p.size)]
    if n_samples is not None and n_samples < len(flat):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(flat), size=n_samples, replace=False)
        flat = [flat[i] for i in sorted(picks)]

    max_err, worst = 0.0, None
    for pi, ci in flat:
        view = params[pi].data.reshape(-1)
        old = view[ci]
        view[ci] = old + h
        f_plus = f().item()
        view[ci] = old - h
        f_minus = f().item()
        view[ci] = old
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(np.asarray(grads[pi]).reshape(-1)[ci])
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), floor)
        if worst is None or err > max_err:
            max_err, worst = err, (pi, ci)
    return GradCheckReport(max_rel_err=max_err, passed=max_err < tol, n_checked=len(flat), worst=worst)
