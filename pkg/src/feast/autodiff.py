"""Dense 2-D tensors with reverse-mode differentiation, plus Adam.

Every tensor is a float64 matrix. Operations on tensors that require grad
record a closure computing the local vector-Jacobian product; ``backward``
walks the recorded graph once in reverse topological order and then
releases it, so each forward pass supports exactly one backward pass.

Broadcasting is limited to row vectors ``(1, n)``, column vectors ``(m, 1)``
and ``(1, 1)`` scalars against an ``(m, n)`` operand.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import math

import numpy as np

LOG_CLAMP = 1e-12
_reduce_add = np.add.reduce


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphStateError(RuntimeError):
    pass


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are rank 2, got shape {arr.shape}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], op: str,
                backward: Callable[[np.ndarray], None]) -> Tensor:
        # a sum is non-finite iff some entry is (barring overflow, itself a failure)
        if not math.isfinite(_reduce_add(data, axis=None)):
            raise NonFiniteError(f"non-finite value produced by {op}")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._consumed = False
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        for p in parents:
            if p._consumed:
                raise GraphStateError(f"{op}: operand belongs to a graph that was already backpropagated")
            if p.requires_grad:
                out.requires_grad = True
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> tuple[int, int]:
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return out[0], out[1]


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor._result(a.data + b.data, (a, b), "add", _bw)


def add_bias(a, bias) -> Tensor:
    """``a + bias`` where bias is a row ``(1, n)`` or column ``(m, 1)`` vector."""
    a, bias = tensor(a), tensor(bias)
    if bias.shape not in ((1, a.shape[1]), (a.shape[0], 1)):
        raise ShapeError(f"add_bias: bias shape {bias.shape} does not fit {a.shape}")
    return add(a, bias)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return Tensor._result(a.data - b.data, (a, b), "sub", _bw)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return Tensor._result(a.data * b.data, (a, b), "mul", _bw)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    out = a.data / b.data

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._result(out, (a, b), "div", _bw)


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return Tensor._result(a.data @ b.data, (a, b), "matmul", _bw)


# -- unary --------------------------------------------------------------------

def transpose(a) -> Tensor:
    a = tensor(a)
    return Tensor._result(a.data.T.copy(), (a,), "transpose", lambda g: _accumulate(a, g.T))


def reshape(a, shape: tuple[int, int]) -> Tensor:
    a = tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), "reshape",
                          lambda g: _accumulate(a, g.reshape(a.shape)))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), "relu", lambda g: _accumulate(a, g * mask))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), "exp", lambda g: _accumulate(a, g * out))


def log(a, clamp: float | None = LOG_CLAMP) -> Tensor:
    """Natural log; inputs below ``clamp`` are clamped and pass zero gradient."""
    a = tensor(a)
    x = a.data if clamp is None else np.maximum(a.data, clamp)
    live = np.ones_like(x) if clamp is None else (a.data >= clamp).astype(np.float64)
    return Tensor._result(np.log(x), (a,), "log", lambda g: _accumulate(a, g * live / x))


def square(a) -> Tensor:
    a = tensor(a)
    return Tensor._result(a.data * a.data, (a,), "square", lambda g: _accumulate(a, 2.0 * g * a.data))


# -- reductions ---------------------------------------------------------------

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = tensor(a)
    if axis is None:
        out = np.array([[a.data.sum()]])
        return Tensor._result(out, (a,), "sum", lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))
    out = a.data.sum(axis=axis, keepdims=True)
    return Tensor._result(out, (a,), "sum", lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean(a, axis: int | None = None) -> Tensor:
    a = tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def mean_rows(a) -> Tensor:
    """Average over rows: ``(m, n) -> (1, n)``."""
    return mean(a, axis=0)


def logsumexp_rows(a) -> Tensor:
    """Row-wise log-sum-exp with max subtraction: ``(m, n) -> (m, 1)``."""
    a = tensor(a)
    shift = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - shift)
    s = e.sum(axis=1, keepdims=True)
    out = shift + np.log(s)
    return Tensor._result(out, (a,), "logsumexp", lambda g: _accumulate(a, g * e / s))


def softmax_row(a) -> Tensor:
    """Row-wise softmax."""
    a = tensor(a)
    e = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return Tensor._result(out, (a,), "softmax", _bw)


def l2_normalize_rows(a, eps: float | None = None) -> Tensor:
    """Scale each row to unit Euclidean norm.

    With ``eps=None`` a row whose norm is at most 1e-12 is an error. With a
    float ``eps`` the norm is floored at ``eps`` instead, so an all-zero row
    maps to an all-zero row.
    """
    a = tensor(a)
    # scale by the row maximum first so squaring cannot overflow
    peak = np.abs(a.data).max(axis=1, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    norms = peak * np.sqrt(((a.data / safe) ** 2).sum(axis=1, keepdims=True))
    if eps is None:
        if np.any(norms <= 1e-12):
            raise DegenerateInputError("l2_normalize_rows: row with zero norm")
        denom = norms
        live = np.ones_like(norms)
    else:
        denom = np.maximum(norms, eps)
        live = (norms >= eps).astype(np.float64)
    out = a.data / denom

    def _bw(g):
        # d(x/|x|) = (g - y <g, y>) / |x| ; constant denominator where floored
        proj = (g * out).sum(axis=1, keepdims=True) * live
        _accumulate(a, (g - out * proj) / denom)

    return Tensor._result(out, (a,), "l2_normalize", _bw)


def layer_norm_rows(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Row-wise layer normalization with per-column gain ``(1, n)`` and bias ``(1, n)``."""
    a, gain, bias = tensor(a), tensor(gain), tensor(bias)
    n = a.shape[1]
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0, keepdims=True))
        if a.requires_grad:
            gx = g * gain.data
            dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=1, keepdims=True) / n)
            _accumulate(a, dx)

    return Tensor._result(out, (a, gain, bias), "layer_norm", _bw)


# -- indexing -----------------------------------------------------------------

def take_rows(a, rows: Sequence[int] | np.ndarray) -> Tensor:
    a = tensor(a)
    rows = np.asarray(rows, dtype=np.intp)

    def _bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, rows, g)
        _accumulate(a, full)

    return Tensor._result(a.data[rows], (a,), "take_rows", _bw)


def take_cols(a, cols: Sequence[int] | np.ndarray) -> Tensor:
    a = tensor(a)
    cols = np.asarray(cols, dtype=np.intp)

    def _bw(g):
        full = np.zeros(a.shape)
        np.add.at(full.T, cols, g.T)
        _accumulate(a, full)

    return Tensor._result(a.data[:, cols], (a,), "take_cols", _bw)


def gather(a, rows, cols) -> Tensor:
    """Entries ``a[rows[k], cols[k]]`` as a column vector ``(k, 1)``; broadcasts like numpy."""
    a = tensor(a)
    rows, cols = np.broadcast_arrays(np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp))
    idx = (rows.reshape(-1), cols.reshape(-1))

    def _bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g.reshape(-1))
        _accumulate(a, full)

    return Tensor._result(a.data[idx].reshape(-1, 1), (a,), "gather", _bw)


def vstack(parts: Sequence[Tensor]) -> Tensor:
    parts = [tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def _bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accumulate(p, g[lo:hi])

    return Tensor._result(np.vstack([p.data for p in parts]), tuple(parts), "vstack", _bw)


# -- losses -------------------------------------------------------------------

def cross_entropy(probs, labels) -> Tensor:
    """Mean over rows of ``-log(probs[i, labels[i]])`` with the log clamped at 1e-12."""
    probs = tensor(probs)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    m, n_classes = probs.shape
    if labels.shape[0] != m:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {m} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"cross_entropy: label outside [0, {n_classes})")
    picked = gather(probs, np.arange(m), labels)
    return mul(sum(log(picked)), -1.0 / m)


def mse(a, b, reduction: str = "mean") -> Tensor:
    """Squared error between ``a`` and ``b``; ``reduction`` is ``"mean"`` or ``"sum"``."""
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    total = sum(square(sub(a, b)))
    if reduction == "sum":
        return total
    if reduction == "mean":
        return mul(total, 1.0 / a.data.size)
    raise ValueError(f"unknown reduction {reduction!r}")


# -- graph traversal ----------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` ordered so operands precede their results."""
    order: list[Tensor] = []
    seen = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack[-1]
        parents = node._parents
        if i < len(parents):
            stack[-1] = (node, i + 1)
            parent = parents[i]
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            stack.pop()
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf, then free the graph."""
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph")
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
    if not loss.requires_grad:
        raise GraphStateError("loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if not node.is_leaf:
            node._consumed = True
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None


def grad(loss: Tensor, inputs: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``inputs``; unreached inputs get exact zeros."""
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad for t in inputs]


# -- optimizers ---------------------------------------------------------------

def _raw(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


@dataclass
class AdamState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params, lr: float, weight_decay: float = 0.0, **kw) -> AdamState:
        shapes = [_raw(p).shape for p in params]
        return cls(lr=lr, weight_decay=weight_decay,
                   m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **kw)

    def apply(self, params, grads):
        return adam_step(self, params, grads)


def adam_step(state: AdamState, params, grads):
    """One Adam update in place; weight decay enters as ``wd * theta`` added to the gradient."""
    arrays = [_raw(p) for p in params]
    grads = [_raw(g) for g in grads]
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeError("adam_step: parameter, gradient and state counts differ")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class SGDState:
    """Plain gradient descent with the same ``apply`` surface as :class:`AdamState`."""

    lr: float
    step: int = 0

    def apply(self, params, grads):
        self.step += 1
        for p, g in zip(params, grads):
            p = _raw(p)
            g = _raw(g)
            if p.shape != g.shape:
                raise ShapeError(f"sgd: shape mismatch {p.shape} vs {g.shape}")
            p -= self.lr * g
        return params
