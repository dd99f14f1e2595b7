"""Dense reverse-mode automatic differentiation on numpy arrays.

Every value is a float64 array. An op builds its output ``Tensor`` and, when
any input requires a gradient, attaches a closure that maps the output
gradient to input gradients. ``backward`` walks the recorded graph in reverse
topological order, accumulating additively, then releases the graph.

Broadcasting is deliberately narrow: scalar * tensor and a row-vector bias
(``add_bias``). Everything else requires matching shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or inf; the message names the op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, only for the shapes the engine supports
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return multiply_scalar(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    # a single reduction is much cheaper than an elementwise isfinite mask
    if not np.isfinite(np.add.reduce(out, axis=None)) and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite output in op '{op}'")
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(out, op=op)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def multiply_scalar(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "multiply_scalar")


def add_bias(x, b) -> Tensor:
    """Add a length-D vector to every row of an (N, D) tensor."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.data.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape}")
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (np.where(out > 0, g, 0.0),), "relu")


def sqrt(x, eps: float = 0.0) -> Tensor:
    """sqrt(x + eps); eps keeps the gradient finite at zero."""
    x = as_tensor(x)
    out = np.sqrt(x.data + eps)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """x @ w + b with a row-vector bias; one graph node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: shapes {x.shape}, {w.shape}, {b.shape}")
    xv, wv = x.data, w.data
    out = xv @ wv
    out += b.data

    def backward(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _make(out, (x, w, b), backward, "affine")


def concat_lastdim(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    lead = ts[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in ts):
        raise ShapeError("concat_lastdim: leading shapes differ: " + ", ".join(str(t.shape) for t in ts))
    splits = np.cumsum([t.shape[-1] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _make(np.concatenate([t.data for t in ts], axis=-1), ts, backward, "concat_lastdim")


def gather_rows(x, index) -> Tensor:
    """Rows ``x[index]``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of bounds for {x.shape[0]} rows")
    n = x.shape[0]

    def backward(g):
        if g.ndim == 1:
            return (np.bincount(index, weights=g, minlength=n),)
        op = sparse.csr_matrix((np.ones(index.size), (index, np.arange(index.size))),
                               shape=(n, index.size))
        return (op @ g,)

    return _make(x.data[index], (x,), backward, "gather_rows")


def take_column(x, j: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"take_column: expected 2-D, got {x.shape}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[:, j] = g
        return (gx,)

    return _make(x.data[:, j].copy(), (x,), backward, "take_column")


def neighbor_mean(x, neighbors) -> Tensor:
    """Row i of the output is the mean of ``x`` over the rows ``neighbors[i]``.

    ``neighbors`` is an (N, k) integer table.
    """
    x = as_tensor(x)
    nb = np.asarray(neighbors, dtype=np.int64)
    if nb.ndim != 2 or (nb.size and (nb.min() < 0 or nb.max() >= x.shape[0])):
        raise IndexError("neighbor_mean: invalid neighbor table")
    n, k = nb.shape
    # rows keep the neighbour order, so each sum runs in k-NN order (permutation-equivariant)
    op = sparse.csr_matrix((np.full(nb.size, 1.0 / k), nb.ravel(), np.arange(0, nb.size + 1, k)),
                           shape=(n, x.shape[0]))
    out = np.asarray(op @ x.data)

    def backward(g):
        return (np.asarray(op.T @ g),)

    return _make(out, (x,), backward, "neighbor_mean")


def l2_normalize_rows(x, eps: float = NORM_EPS) -> Tensor:
    """x / max(||x||, eps) row-wise. Zero rows map to zero rows."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-D, got {x.shape}")
    xv = x.data
    norm = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = xv / denom

    def backward(g):
        # below eps the map is linear (x / eps) so only the first term survives
        dot = np.sum(g * out, axis=1, keepdims=True)
        return (np.where(big, (g - out * dot) / denom, g / eps),)

    return _make(out, (x,), backward, "l2_normalize_rows")


# ---------------------------------------------------------------- reductions

def sum(x) -> Tensor:  # noqa: A001 - mirrors the op name
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_lastdim(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(x.data.sum(axis=-1), (x,),
                 lambda g: (np.broadcast_to(g[..., None], shape).copy(),), "sum_lastdim")


# ---------------------------------------------------------------- losses

def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mse", a, b)
    d = a.data - b.data
    n = d.size
    if n == 0:
        raise ShapeError("mse: empty tensor")

    def backward(g):
        ga = (2.0 * float(g) / n) * d
        return ga, -ga

    return _make(np.asarray(np.mean(d * d)), (a, b), backward, "mse")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy, log-sum-exp stable form."""
    z, t = as_tensor(logits), as_tensor(targets)
    _same_shape("bce_with_logits", z, t)
    zv, tv = z.data, t.data
    n = zv.size
    loss = np.maximum(zv, 0.0) - zv * tv + np.log1p(np.exp(-np.abs(zv)))
    sig = np.where(zv >= 0, 1.0 / (1.0 + np.exp(-np.abs(zv))), np.exp(-np.abs(zv)) / (1.0 + np.exp(-np.abs(zv))))

    def backward(g):
        s = float(g) / n
        return s * (sig - tv), s * (-zv)

    return _make(np.asarray(loss.mean()), (z, t), backward, "bce_with_logits")


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of (N, C) logits against integer labels."""
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.data.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape}, labels {labels.shape}")
    n = z.shape[0]
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = logsum - shifted[rows, labels]
    prob = np.exp(shifted - logsum[:, None])

    def backward(g):
        gz = prob.copy()
        gz[rows, labels] -= 1.0
        return (gz * (float(g) / n),)

    return _make(np.asarray(loss.mean()), (z,), backward, "cross_entropy")


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
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
    """Accumulate d loss / d leaf into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        in_grads = node._backward(g)
        for parent, pg in zip(node._parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        # release the graph as we go
        node._parents = ()
        node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
