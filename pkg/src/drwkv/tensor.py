"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every operation on a tensor that requires a gradient appends its output to a
process-wide record.  :func:`backward` walks that record in exact reverse
execution order, calling each node's adjoint, and then clears it.

Arrays are numpy ``float32`` (``float64`` only inside :func:`precision`, which
exists for finite-difference checks).  Reductions use numpy's pairwise
summation, which is deterministic for a given shape and input.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "NonFiniteError", "GradError", "DiffRecord",
    "as_tensor", "no_grad", "precision", "grad_enabled", "backward", "record_op",
    "add", "sub", "mul", "neg", "exp", "tanh", "sigmoid", "relu_sq", "silu",
    "maximum", "clamp", "matmul", "layer_norm", "concat", "split", "reshape",
    "transpose", "sum", "mean", "mse", "take_rows", "detach",
]


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class GradError(RuntimeError):
    """Misuse of the differentiation record."""


class DiffRecord:
    """Ordered list of executed operations whose adjoints can be replayed."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def append(self, node: "Tensor") -> None:
        node._recorded = True
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._recorded = False
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_RECORD = DiffRecord()
_GRAD_ENABLED = True
_DTYPE = np.float32


def current_record() -> DiffRecord:
    return _RECORD


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording (sampling, EMA evaluation)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    # one reduction pass: any NaN/Inf element makes the sum non-finite
    if not np.isfinite(np.add.reduce(data, axis=None)):
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name",
                 "_parents", "_backward", "_recorded")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._recorded = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._recorded

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).data)


def record_op(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str = "op") -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``adjoint(g)`` receives dL/d(out) and returns one gradient (or None) per
    parent; gradients may be broadcast-shaped and are reduced here.
    """
    _check_finite(data, op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, name=None)
    if needs:
        out._parents = tuple(parents)
        out._backward = adjoint
        _RECORD.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor, retain_grads: bool = True) -> None:
    """Populate ``.grad`` on everything that ``loss`` depends on, then clear the record.

    With ``retain_grads=False`` intermediate gradients are freed as soon as
    they have been propagated; leaf gradients are always kept and accumulate
    across calls until :meth:`Tensor.zero_grad`.
    """
    if loss.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._recorded:
        raise GradError("loss is not in the current record (backward already ran, or no recorded op produced it)")
    loss.grad = np.ones_like(loss.data)
    nodes = _RECORD.nodes
    for node in reversed(nodes):
        g = node.grad
        if g is None:
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg, dtype=parent.data.dtype), parent.shape)
            parent.grad = pg if parent.grad is None else parent.grad + pg
        if not retain_grads and node is not loss:
            node.grad = None
    _RECORD.clear()


def _lift(*xs) -> list[Tensor]:
    return [as_tensor(x) for x in xs]


# --- pointwise ---------------------------------------------------------------

def add(x, y) -> Tensor:
    x, y = _lift(x, y)
    return record_op(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(x, y) -> Tensor:
    x, y = _lift(x, y)
    return record_op(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def mul(x, y) -> Tensor:
    x, y = _lift(x, y)
    xd, yd = x.data, y.data
    return record_op(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,), "exp")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record_op(out, (x,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return record_op(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu_sq(x) -> Tensor:
    """max(x, 0)**2"""
    x = as_tensor(x)
    r = np.maximum(x.data, 0)
    return record_op(r * r, (x,), lambda g: (2 * g * r,), "relu_sq")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    xd = x.data
    return record_op(xd * s, (x,), lambda g: (g * s * (1 + xd * (1 - s)),), "silu")


def maximum(x, y) -> Tensor:
    """Elementwise max; ties send the gradient to ``x``."""
    x, y = _lift(x, y)
    pick = x.data >= y.data
    return record_op(np.where(pick, x.data, y.data), (x, y),
                     lambda g: (g * pick, g * ~pick), "maximum")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return record_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# --- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading axes of ``a`` are batch axes."""
    a, b = _lift(a, b)
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    # one GEMM over the flattened batch; numpy would otherwise loop per item
    a2 = a.data.reshape(-1, a.shape[-1])
    bd = b.data
    out_shape = a.shape[:-1] + (bd.shape[1],)

    def adjoint(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bd.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return record_op((a2 @ bd).reshape(out_shape), (a, b), adjoint, "matmul")


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with population variance; optional affine."""
    x = as_tensor(x)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("layer_norm over an empty axis")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [x]
    out = xhat
    if gamma is not None:
        gamma = as_tensor(gamma)
        parents.append(gamma)
        out = out * gamma.data
    if beta is not None:
        beta = as_tensor(beta)
        parents.append(beta)
        out = out + beta.data

    def adjoint(g):
        gx = g * gamma.data if gamma is not None else g
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return grads

    return record_op(out, parents, adjoint, "layer_norm")


# --- structural ------------------------------------------------------------------

def concat(xs: Iterable, axis: int = -1) -> Tensor:
    xs = _lift(*xs)
    axis = axis % xs[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def adjoint(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return record_op(np.concatenate([t.data for t in xs], axis=axis), xs, adjoint, "concat")


def split(x, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split into consecutive pieces of the given sizes along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    outs = []
    lo = 0
    for size in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, lo + size)
        sl = tuple(idx)

        def adjoint(g, sl=sl):
            full = np.zeros_like(x.data)
            full[sl] = g
            return (full,)

        outs.append(record_op(x.data[sl], (x,), adjoint, "split"))
        lo += size
    return outs


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inv),), "transpose")


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return record_op(np.asarray(x.data.sum(axis=axis)), (x,), adjoint, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def adjoint(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return record_op(np.asarray(x.data.mean(axis=axis)), (x,), adjoint, "mean")


def mse(x, y) -> Tensor:
    """mean((x - y)**2) over every element."""
    x, y = _lift(x, y)
    diff = x.data - y.data
    n = diff.size
    return record_op(np.asarray((diff * diff).mean()), (x, y),
                     lambda g: (2 * g * diff / n, -2 * g * diff / n), "mse")


def take_rows(table, idx) -> Tensor:
    """``table[idx]`` for an integer index array (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def adjoint(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return record_op(table.data[idx], (table,), adjoint, "take_rows")
