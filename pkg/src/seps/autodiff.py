"""Minimal reverse-mode differentiation substrate on float64 numpy arrays.

Tensors are immutable value holders that record their producing operation;
a Graph is the topologically ordered tape rooted at one output node.  All
kernels are deterministic, reject non-finite results, and use fixed
accumulation order so two identical runs are bitwise identical.

Subgradient conventions: max/topk route to the first-occurrence winner,
clip passes gradient only strictly inside the interval's closure, and
straight_through forwards a constant while backpropagating as identity.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import EmptySupportError, GraphError, NonFiniteError, ShapeError


@dataclass(frozen=True)
class NumericConstants:
    eps_norm: float = 1e-8   # degenerate-range guard for min-max normalization
    eps_log: float = 1e-8    # additive guard before log
    fd_step: float = 1e-6    # central-difference step

    def __post_init__(self) -> None:
        if min(self.eps_norm, self.eps_log, self.fd_step) <= 0.0:
            raise ValueError("numeric constants must be strictly positive")


CONSTANTS = NumericConstants()

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # keeps 0-d shape intact
    return arr


class Tensor:
    """Float64 array node in a compute graph.

    `parents`/`vjp` are empty for leaves.  `vjp` maps the upstream adjoint
    to one adjoint per parent (None for parents with no gradient path).
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple["Tensor", ...] = (), vjp: Callable | None = None):
        self.data = _as_f64(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anon>'}")
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

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
        if self.data.size != 1:
            raise ShapeError("item() on non-scalar tensor")
        return float(self.data.reshape(()))

    def tracked(self) -> bool:
        return self.requires_grad or bool(self.parents)

    def __repr__(self) -> str:
        tag = self.name or ("leaf" if not self.parents else "node")
        return f"Tensor({tag}, shape={self.shape})"

    # Arithmetic sugar; scalars are promoted to constants.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise ShapeError("tensor/tensor division is not supported; use recip")

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return constant(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, name: str) -> Tensor:
    if _grad_enabled and any(p.tracked() for p in parents):
        return Tensor(data, parents=parents, vjp=vjp, name=name)
    return Tensor(data, name=name)


# ---------------------------------------------------------------------------
# elementwise kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    out = a.data + b.data

    def vjp(g):
        ga = g if a.shape == out.shape else np.sum(g)
        gb = g if b.shape == out.shape else np.sum(g)
        return ga, gb

    return _node(out, (a, b), vjp, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if a.shape != out.shape:
            ga = np.sum(ga)
        if b.shape != out.shape:
            gb = np.sum(gb)
        return ga, gb

    return _node(out, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _node(a.data + float(c), (a,), lambda g: (g,), "add_scalar")


def recip(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):  # zero input surfaces as NonFiniteError
        out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _node(out, (a,), vjp, "recip")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):  # -> NonFiniteError
        out = np.log(ad)

    def vjp(g):
        return (g / ad,)

    return _node(out, (a,), vjp, "log")


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise logistic function; gradient y*(1-y)."""
    out = _sigmoid_np(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp, "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # Stable in both tails; never overflows.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without underflow to -inf."""
    ad = a.data
    out = -np.logaddexp(0.0, -ad)

    def vjp(g):
        return (g * _sigmoid_np(-ad),)

    return _node(out, (a,), vjp, "log_sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), vjp, "tanh")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = np.maximum(ad, 0.0)

    def vjp(g):
        return (g * (ad > 0.0),)

    return _node(out, (a,), vjp, "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes on the closed interval interior."""
    ad = a.data
    out = np.clip(ad, lo, hi)
    gate = (ad >= lo) & (ad <= hi)

    def vjp(g):
        return (g * gate,)

    return _node(out, (a,), vjp, "clip")


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward the constant `hard`, backpropagate as identity into `soft`."""
    hard = _as_f64(hard)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through shapes {hard.shape} vs {soft.shape}")
    return _node(hard.copy(), (soft,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes {ad.shape} vs {bd.shape}")
    out = ad @ bd

    if bd.ndim == 2:
        def vjp(g):
            return g @ bd.T, ad.T @ g
    else:
        def vjp(g):
            return np.outer(g, bd), ad.T @ g

    return _node(out, (a, b), vjp, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def dot(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 1 or ad.shape != bd.shape:
        raise ShapeError(f"dot shapes {ad.shape} vs {bd.shape}")
    out = ad @ bd

    def vjp(g):
        return g * bd, g * ad

    return _node(out, (a, b), vjp, "dot")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.full(shape, g),)

    return _node(np.sum(a.data), (a,), vjp, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of empty tensor")
    shape, n = a.shape, a.size

    def vjp(g):
        return (np.full(shape, g / n),)

    return _node(np.mean(a.data), (a,), vjp, "mean_all")


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    ad, sd = a.data, s.data
    if ad.ndim != 2 or sd.shape != (ad.shape[0],):
        raise ShapeError(f"scale_rows shapes {ad.shape} vs {sd.shape}")
    out = ad * sd[:, None]

    def vjp(g):
        return g * sd[:, None], np.sum(g * ad, axis=1)

    return _node(out, (a, s), vjp, "scale_rows")


def scale_cols(a: Tensor, s: Tensor) -> Tensor:
    ad, sd = a.data, s.data
    if ad.ndim != 2 or sd.shape != (ad.shape[1],):
        raise ShapeError(f"scale_cols shapes {ad.shape} vs {sd.shape}")
    out = ad * sd[None, :]

    def vjp(g):
        return g * sd[None, :], np.sum(g * ad, axis=0)

    return _node(out, (a, s), vjp, "scale_cols")


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add v to every row of a (bias over the trailing axis)."""
    ad, vd = a.data, v.data
    if ad.ndim != 2 or vd.shape != (ad.shape[1],):
        raise ShapeError(f"add_rowvec shapes {ad.shape} vs {vd.shape}")

    def vjp(g):
        return g, np.sum(g, axis=0)

    return _node(ad + vd[None, :], (a, v), vjp, "add_rowvec")


def add_colvec(a: Tensor, v: Tensor) -> Tensor:
    """Add v_i to every entry of row i."""
    ad, vd = a.data, v.data
    if ad.ndim != 2 or vd.shape != (ad.shape[0],):
        raise ShapeError(f"add_colvec shapes {ad.shape} vs {vd.shape}")

    def vjp(g):
        return g, np.sum(g, axis=1)

    return _node(ad + vd[:, None], (a, v), vjp, "add_colvec")


def rows_l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row; rows must be nonzero for a finite vjp."""
    ad = a.data
    if ad.ndim != 2:
        raise ShapeError("rows_l2norm expects a matrix")
    out = np.sqrt(np.sum(ad * ad, axis=1))

    def vjp(g):
        return ((g / out)[:, None] * ad,)

    return _node(out, (a,), vjp, "rows_l2norm")


# ---------------------------------------------------------------------------
# structured ops


def softmax_columns(x: Tensor, support: np.ndarray | None = None) -> Tensor:
    """Column-wise softmax over the rows listed in `support`.

    Rows outside the support are exactly zero in the output and receive no
    gradient.  Raises if the support is empty.
    """
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError("softmax_columns expects a matrix")
    n, m = xd.shape
    if n == 0 or m == 0:
        raise ShapeError("softmax_columns on empty matrix")
    if support is None:
        keep = np.ones(n, dtype=bool)
    else:
        keep = np.asarray(support, dtype=bool)
        if keep.shape != (n,):
            raise ShapeError(f"support shape {keep.shape} for {xd.shape} matrix")
    if not keep.any():
        raise EmptySupportError("empty softmax support")

    out = _softmax_columns_np(xd, keep)

    def vjp(g):
        inner = np.sum(g * out, axis=0, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (x,), vjp, "softmax_columns")


def _softmax_columns_np(xd: np.ndarray, keep: np.ndarray) -> np.ndarray:
    rows = xd[keep]
    shifted = rows - np.max(rows, axis=0, keepdims=True)
    e = np.exp(shifted)
    w = e / np.sum(e, axis=0, keepdims=True)
    out = np.zeros_like(xd)
    out[keep] = w
    return out


def row_max_with_arg(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-row maximum and first-occurrence argmax.

    The subgradient routes entirely to the argmax entry of each row.
    """
    xd = x.data
    if xd.ndim != 2 or xd.size == 0:
        raise ShapeError("row_max_with_arg expects a non-empty matrix")
    arg = np.argmax(xd, axis=1)
    rows = np.arange(xd.shape[0])
    values = xd[rows, arg]

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[rows, arg] = g
        return (gx,)

    return _node(values, (x,), vjp, "row_max"), arg


def topk(x: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """k largest entries in descending order, with their source indices.

    When k exceeds the length, the output is padded with the minimum value;
    padded slots route gradient to the (first-occurrence) argmin position.
    Ties order by first occurrence.
    """
    xd = x.data
    if xd.ndim != 1 or xd.size == 0:
        raise ShapeError("topk expects a non-empty vector")
    if k < 1:
        raise ShapeError("topk needs k >= 1")
    order = np.argsort(-xd, kind="stable")
    if k <= xd.size:
        idx = order[:k]
    else:
        pad = np.full(k - xd.size, np.argmin(xd))
        idx = np.concatenate([order, pad])
    values = xd[idx]

    def vjp(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(values, (x,), vjp, "topk"), idx


def gather(x: Tensor, indices: np.ndarray) -> Tensor:
    xd = x.data
    if xd.ndim != 1:
        raise ShapeError("gather expects a vector")
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(xd[idx], (x,), vjp, "gather")


def element(x: Tensor, i: int, j: int) -> Tensor:
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError("element expects a matrix")

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[i, j] = g
        return (gx,)

    return _node(xd[i, j], (x,), vjp, "element")


def stack(parts: Sequence[Tensor], shape: tuple[int, ...]) -> Tensor:
    """Assemble scalar tensors into one array of the given shape."""
    parts = tuple(parts)
    if any(p.size != 1 for p in parts):
        raise ShapeError("stack expects scalar tensors")
    if int(np.prod(shape)) != len(parts):
        raise ShapeError(f"stack of {len(parts)} scalars into shape {shape}")
    data = np.array([p.data.reshape(()) for p in parts], dtype=np.float64).reshape(shape)

    def vjp(g):
        flat = g.reshape(-1)
        return tuple(flat[i] for i in range(len(parts)))

    return _node(data, parts, vjp, "stack")


# ---------------------------------------------------------------------------
# graph and gradients


class Graph:
    """Topologically ordered tape from leaves to one output node."""

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)
        self.adjoints: dict[int, np.ndarray] = {}

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
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
            # reversed so parents expand in declared order
            for parent in reversed(node.parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> dict[int, np.ndarray]:
        """Accumulate adjoints in reverse topological order."""
        if self.output.data.shape != ():
            raise GraphError("gradient of non-scalar output")
        adj: dict[int, np.ndarray] = {id(self.output): np.ones(())}
        for node in reversed(self.nodes):
            g = adj.get(id(node))
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.tracked():
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                key = id(parent)
                if key in adj:
                    adj[key] = adj[key] + pg
                else:
                    adj[key] = pg
        self.adjoints = adj
        return adj


def gradient(output: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse-mode gradients of a scalar output for every requested leaf.

    Leaves not reached by any path get a zero gradient of matching shape.
    """
    graph = Graph(output)
    adj = graph.backward()
    if wrt is None:
        leaves = [n for n in graph.nodes if n.requires_grad and not n.parents]
    else:
        leaves = list(wrt)
    out: dict[Tensor, Tensor] = {}
    for leaf in leaves:
        g = adj.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape)
        elif np.asarray(g).shape != leaf.shape:
            g = np.broadcast_to(g, leaf.shape).copy()
        out[leaf] = constant(g, name="grad")
    return out


def fd_gradient(f: Callable[[Tensor], Tensor], point: Tensor,
                step: float = CONSTANTS.fd_step) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    base = point.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    with no_grad():
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += step
            hi = f(constant(bumped.reshape(base.shape))).item()
            bumped[i] -= 2.0 * step
            lo = f(constant(bumped.reshape(base.shape))).item()
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError("non-finite evaluation in finite difference")
            flat[i] = (hi - lo) / (2.0 * step)
    return grad


def finite_difference_check(f: Callable[[Tensor], Tensor], point: Tensor,
                            step: float = CONSTANTS.fd_step) -> float:
    """Max over coordinates of |analytic - central| / max(1, |analytic|).

    Large errors are reported, never masked; only non-finite evaluations
    raise.
    """
    probe = tensor(point.data.copy(), requires_grad=True)
    out = f(probe)
    analytic = gradient(out, [probe])[probe].data
    numeric = fd_gradient(f, probe, step=step)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
