"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable result records its parents and a closure mapping the
output gradient to per-parent gradients. Node ids come from a global
counter, so sorting reachable nodes by id (descending) walks the tape in
strict reverse creation order.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import ContractError, DomainError, ShapeError

_ids = itertools.count()
_grad_enabled = True
_kink_log: list | None = None

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (evaluation, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_kinks():
    """Collect the branch pattern of every non-smooth op (relu sign, max
    argmax, clamp bounds) evaluated inside the block. Finite-difference
    checks compare patterns to detect stencils straddling a kink."""
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._id = next(_ids)
        self.name = name

    # -- introspection
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str:
        return self._op

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self._op})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis: int, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op's forward output and, if taping, link it into the graph."""
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


# ------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t._backward is None:
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
            else:
                t.grad += g
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = unbroadcast(gp, p.shape)
            if p._id in grads:
                grads[p._id] = grads[p._id] + gp
            else:
                grads[p._id] = gp


# ------------------------------------------------------ elementwise ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return make_result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def _gelu(x):
    return kernels.gelu_forward(x)


def _gelu_grad(x, y, g):
    return kernels.gelu_backward(x, g)


def _log_fwd(x):
    if np.any(x <= 0):
        raise DomainError("log of non-positive input")
    return np.log(x)


# name -> (forward(x), backward(x, y, g)). Backward rules are looked up at
# call time, which is what lets gradcheck fault-injection swap one out.
UNARY_RULES: dict[str, tuple[Callable, Callable]] = {
    "neg": (np.negative, lambda x, y, g: -g),
    "tanh": (np.tanh, lambda x, y, g: g * (1.0 - y * y)),
    "sigmoid": (expit, lambda x, y, g: g * y * (1.0 - y)),
    "exp": (np.exp, lambda x, y, g: g * y),
    "log": (_log_fwd, lambda x, y, g: g / x),
    "relu": (lambda x: np.maximum(x, 0), lambda x, y, g: g * (x > 0)),
    "gelu": (_gelu, _gelu_grad),
}


def unary(name: str, a: Tensor) -> Tensor:
    fwd, _ = UNARY_RULES[name]
    x = a.data
    if _kink_log is not None and name == "relu":
        _kink_log.append(x > 0)
    y = fwd(x).astype(x.dtype, copy=False)
    return make_result(y, (a,), lambda g: (UNARY_RULES[name][1](x, y, g),), name)


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add/sub/mul/div take two operands, the rest one."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    if op in binary:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return binary[op](a, b)
    if op not in UNARY_RULES:
        raise ContractError(f"unknown elementwise op {op!r}")
    return unary(op, as_tensor(a))


def neg(a):
    return unary("neg", a)


def tanh(a):
    return unary("tanh", a)


def sigmoid(a):
    return unary("sigmoid", a)


def exp(a):
    return unary("exp", a)


def log(a):
    return unary("log", a)


def relu(a):
    return unary("relu", a)


def gelu(a):
    return unary("gelu", a)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    if _kink_log is not None:
        _kink_log.append(np.sign(x - lo) + np.sign(x - hi))
    return make_result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from None

    def bw(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return make_result(out, (a, b), bw, "matmul")


# ------------------------------------------------------------ reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return make_result(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept), shape),), "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DomainError("mean over an empty axis")
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    inv = 1.0 / count
    return make_result(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept) * inv, shape),), "mean")


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first (lowest-index) argmax."""
    (ax,) = _norm_axes(axis, a.ndim)
    if a.shape[ax] == 0:
        raise DomainError("max over an empty axis")
    x = a.data
    idx = np.argmax(x, axis=ax)
    if _kink_log is not None:
        _kink_log.append(idx)
    idx_k = np.expand_dims(idx, ax)
    out = np.take_along_axis(x, idx_k, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def bw(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx_k, g.reshape(idx_k.shape), axis=ax)
        return (gx,)

    return make_result(out, (a,), bw, "max")


def reduce(op: str, a: Tensor, axis, keepdims: bool = False) -> Tensor:
    fns = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if op not in fns:
        raise ContractError(f"unknown reduction {op!r}")
    return fns[op](a, axis, keepdims)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (a,), bw, "softmax")


# ------------------------------------------------------------ shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing. Use ``take`` for integer-array gathers."""
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[idx] += g
        return (gx,)

    return make_result(np.array(out, copy=True), (a,), bw, "getitem")


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    indices = np.asarray(indices)
    x = a.data
    out = np.take(x, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(x)
        gm = np.moveaxis(gx, axis, 0)
        gsrc = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(gm, indices, gsrc)
        return (gx,)

    return make_result(out, (a,), bw, "take")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, ts, bw, "concat")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` follows ``np.pad``."""
    widths = [tuple(w) for w in widths]
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_result(out, (a,), lambda g: (g[sl],), "pad")


def roll(a: Tensor, shift, axis) -> Tensor:
    neg_shift = tuple(-s for s in shift) if isinstance(shift, (tuple, list)) else -shift
    out = np.roll(a.data, shift, axis=axis)
    return make_result(out, (a,), lambda g: (np.roll(g, neg_shift, axis=axis),), "roll")
