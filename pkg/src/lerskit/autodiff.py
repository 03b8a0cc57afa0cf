"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps an ndarray; every operation records its parents and a
closure that maps the output gradient to parent gradients. Calling
`backward` on a scalar walks the recorded graph in reverse creation
order (a valid topological order, so results are deterministic) and
accumulates gradients into `.grad`.

Only the primitives the recommenders need are provided; this is not a
general-purpose autodiff system.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the default float precision (float64 for reproducible tests,
    float32 for profiling parity with typical deployments)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Operand shapes are incompatible; carries the op name."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class NonScalarLossError(ValueError):
    pass


_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_id", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name or ''} contains NaN/Inf entries")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    # -- internal node construction (op outputs skip finiteness validation) --
    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple["Tensor", ...], bwd, name: str) -> "Tensor":
        t = cls.__new__(cls)
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.flags.writeable:
            data.flags.writeable = False
        t.data = data
        t.grad = None
        t.requires_grad = any(p.requires_grad for p in parents)
        t.name = name
        t._id = next(_ids)
        if t.requires_grad:
            t._parents = parents
            t._bwd = bwd
        else:
            t._parents = ()
            t._bwd = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.grad = None
        t.requires_grad = False
        t.name = self.name
        t._id = next(_ids)
        t._parents = ()
        t._bwd = None
        return t

    def assign(self, data: np.ndarray) -> None:
        """Replace the stored values (used by optimizers). The old array is
        never mutated so concurrent readers stay safe."""
        arr = np.asarray(data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError("assign", f"expected {self.data.shape}, got {arr.shape}")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        self.data = arr

    def _accumulate(self, g: np.ndarray) -> None:
        # grads are never mutated in place, so aliasing a view here is safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # -- operator sugar --
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError("add", str(e)) from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._node(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ShapeError("sub", str(e)) from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._node(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError("mul", str(e)) from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._node(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data / b.data
    except ValueError as e:
        raise ShapeError("div", str(e)) from None

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._node(out, (a, b), bwd, "div")


def neg(a) -> Tensor:
    a = _coerce(a)

    def bwd(g):
        a._accumulate(-g)

    return Tensor._node(-a.data, (a,), bwd, "neg")


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    out = a.data ** p

    def bwd(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return Tensor._node(out, (a,), bwd, "pow")


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out = np.sqrt(a.data)

    def bwd(g):
        a._accumulate(g * 0.5 / out)

    return Tensor._node(out, (a,), bwd, "sqrt")


def absolute(a) -> Tensor:
    a = _coerce(a)
    s = np.sign(a.data)

    def bwd(g):
        a._accumulate(g * s)

    return Tensor._node(np.abs(a.data), (a,), bwd, "abs")


def sign(a) -> Tensor:
    """Detached sign; gradient does not flow (derivative is 0 a.e.)."""
    a = _coerce(a)
    return Tensor._node(np.sign(a.data), (), None, "sign")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        a._accumulate(g * out * (1.0 - out))

    return Tensor._node(out, (a,), bwd, "sigmoid")


def tanh(a) -> Tensor:
    a = _coerce(a)
    out = np.tanh(a.data)

    def bwd(g):
        a._accumulate(g * (1.0 - out * out))

    return Tensor._node(out, (a,), bwd, "tanh")


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0

    def bwd(g):
        a._accumulate(g * mask)

    return Tensor._node(np.where(mask, a.data, 0.0), (a,), bwd, "relu")


def exp(a) -> Tensor:
    a = _coerce(a)
    out = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * out)

    return Tensor._node(out, (a,), bwd, "exp")


def log(a) -> Tensor:
    a = _coerce(a)
    out = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return Tensor._node(out, (a,), bwd, "log")


def softplus(a) -> Tensor:
    a = _coerce(a)
    # log(1 + e^x) computed without overflow
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g):
        x = a.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        s[~pos] = e / (1.0 + e)
        a._accumulate(g * s)

    return Tensor._node(out, (a,), bwd, "softplus")


def softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate((g - dot) * out)

    return Tensor._node(out, (a,), bwd, "softmax")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through inside [lo, hi] and zero outside."""
    a = _coerce(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        a._accumulate(g * mask)

    return Tensor._node(np.clip(a.data, lo, hi), (a,), bwd, "clip")


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._node(np.asarray(out), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else a.shape[axis]

    def bwd(g):
        g = np.asarray(g) / denom
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._node(np.asarray(out), (a,), bwd, "mean")


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", str(e)) from None

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._node(out.copy(), (a,), bwd, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        a._accumulate(np.transpose(g, inv))

    return Tensor._node(out.copy(), (a,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", str(e)) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._node(out, tuple(tensors), bwd, "concat")


def gather_rows(a, idx) -> Tensor:
    """Select rows `idx` (axis 0); the gradient scatter-adds back."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows", f"index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range [0, {a.shape[0]})")
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor._node(out, (a,), bwd, "gather_rows")


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._node(out, (a, b), bwd, "matmul")


def bmm(a, b) -> Tensor:
    """Batched matmul: (B,m,k) @ (B,k,n) -> (B,m,n)."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", f"cannot batch-multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b._accumulate(a.data.transpose(0, 2, 1) @ g)

    return Tensor._node(out, (a, b), bwd, "bmm")


def spmm(adj: sp.csr_matrix, x: Tensor, adj_t: sp.csr_matrix | None = None) -> Tensor:
    """Sparse (constant) @ dense (differentiable). Pass the precomputed
    transpose when calling repeatedly, e.g. graph propagation loops."""
    x = _coerce(x)
    if adj.shape[1] != x.shape[0]:
        raise ShapeError("spmm", f"cannot multiply {adj.shape} by {x.shape}")
    out = adj @ x.data
    at = adj_t if adj_t is not None else adj.T.tocsr()

    def bwd(g):
        x._accumulate(at @ g)

    return Tensor._node(out, (x,), bwd, "spmm")


def rows_from_csr(values: Tensor, rowptr: np.ndarray, indices: np.ndarray,
                  ids, width: int) -> Tensor:
    """Densify CSR rows `ids` into a (len(ids), width) block, differentiable
    in the nonzero values."""
    values = _coerce(values)
    ids = np.asarray(ids, dtype=np.int64)
    n = rowptr.shape[0] - 1
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"rows_from_csr: index out of range [0, {n})")
    starts = rowptr[ids]
    counts = rowptr[ids + 1] - starts
    total = int(counts.sum())
    if total:
        # flat positions of every stored entry of the requested rows
        offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
        flat = np.repeat(starts, counts) + (np.arange(total) - np.repeat(offsets, counts))
        cols = indices[flat]
    else:
        flat = np.empty(0, dtype=np.int64)
        cols = np.empty(0, dtype=np.int64)
    rows = np.repeat(np.arange(ids.size), counts)
    out = np.zeros((ids.size, width), dtype=values.data.dtype)
    out[rows, cols] = values.data[flat]

    def bwd(g):
        gv = np.zeros_like(values.data)
        np.add.at(gv, flat, g[rows, cols])
        values._accumulate(gv)

    return Tensor._node(out, (values,), bwd, "rows_from_csr")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        return mul(x, np.zeros(x.shape))
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise inner product of two (B,d) tensors -> (B,)."""
    return tsum(mul(a, b), axis=1)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into `.grad` for every reachable node that
    requires gradients. `loss` must be a scalar."""
    if loss.size != 1 or loss.ndim != 0:
        raise NonScalarLossError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    # reachable subgraph, then reverse creation order == reverse topological
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen.add(t._id)
        nodes.append(t)
        stack.extend(p for p in t._parents if p.requires_grad and p._id not in seen)
    nodes.sort(key=lambda t: t._id, reverse=True)
    loss._accumulate(np.ones((), dtype=loss.data.dtype))
    for t in nodes:
        if t._bwd is not None and t.grad is not None:
            t._bwd(t.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def forward_backward(compute: Callable[..., Tensor], inputs: Sequence[Tensor]):
    """Run `compute(*inputs)`, backpropagate from its scalar output, and
    return (output tensor, [gradient per input])."""
    zero_grads(inputs)
    out = compute(*inputs)
    backward(out)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in inputs]
    return out, grads


def finite_diff_grad(f: Callable[..., float], xs: Sequence[np.ndarray], h: float = 1e-5):
    """Central-difference gradient estimate of a scalar function, one entry
    at a time: (f(x+h) - f(x-h)) / 2h. Test oracle; O(size) evaluations."""
    if h <= 0:
        raise ValueError("h must be positive")
    xs = [np.array(x, dtype=np.float64) for x in xs]
    grads = []
    for k, x in enumerate(xs):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*xs))
            flat[i] = orig - h
            fm = float(f(*xs))
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads
