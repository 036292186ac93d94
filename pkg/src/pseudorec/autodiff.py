"""Reverse-mode automatic differentiation over dense numpy tensors.

Every model and loss in this package is a graph of the primitives defined
here (plus the layer kernels in :mod:`pseudorec.layers`, which plug into the
same machinery through :func:`op_node`).  Tensors wrap float32 numpy arrays by
default; float64 graphs are supported so derivative formulas can be verified
at high precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DomainError, NotScalar, ShapeMismatch

DEFAULT_DTYPE = np.float32

Scalar = Union[int, float]


class Tensor:
    """A dense n-d array with an optional gradient slot.

    ``data`` is a numpy array (float32 unless constructed otherwise); ``grad``
    starts as ``None`` and accumulates across :meth:`backward` calls until
    :meth:`zero_grad`.  Tensors produced by operations remember their parents
    and a backward closure; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = "leaf"

    # -- bookkeeping ---------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Constant view of the same values, cut out of the graph."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return mul(self, _lift(1.0 / other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- graph ---------------------------------------------------------------

    def backward(self) -> None:
        backward(self)

    # method forms of the common unaries, for fluent model code
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def maximum(self, c: Scalar):
        return max_const(self, c)

    def relu(self):
        return max_const(self, 0.0)

    def tanh(self):
        return tanh(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def op_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Create the output tensor of an operation.

    ``backward_fn(grad_out)`` must return an iterable of ``(parent, grad)``
    contributions.  Parents are only retained when some input requires a
    gradient, so inference-only graphs carry no history.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype), dtype=dtype)


# -- broadcasting ------------------------------------------------------------


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Broadcast shape of two operands; only extent-1 axes may stretch."""
    out = []
    ra, rb = len(a), len(b)
    for i in range(max(ra, rb)):
        da = a[ra - 1 - i] if i < ra else 1
        db = b[rb - 1 - i] if i < rb else 1
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeMismatch(f"cannot broadcast {a} with {b}")
    return tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise primitives --------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def backward_fn(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return op_node(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def backward_fn(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return op_node(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def backward_fn(g):
        return [
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        ]

    return op_node(a.data * b.data, (a, b), backward_fn, "mul")


def neg(a: Tensor) -> Tensor:
    return op_node(-a.data, (a,), lambda g: [(a, -g)], "neg")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward_fn(g):
        return [(a, g * out_data)]

    return op_node(out_data, (a,), backward_fn, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")

    def backward_fn(g):
        return [(a, g / a.data)]

    return op_node(np.log(a.data), (a,), backward_fn, "log")


def max_const(a: Tensor, c: Scalar) -> Tensor:
    """Elementwise max with a scalar constant (relu when c == 0)."""
    c = a.dtype.type(c)

    def backward_fn(g):
        return [(a, g * (a.data > c))]

    return op_node(np.maximum(a.data, c), (a,), backward_fn, "max_const")


def relu(a: Tensor) -> Tensor:
    return max_const(a, 0.0)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, a.dtype.type(1), a.dtype.type(slope))

    def backward_fn(g):
        return [(a, g * scale)]

    return op_node(a.data * scale, (a,), backward_fn, "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward_fn(g):
        return [(a, g * (1.0 - out_data * out_data))]

    return op_node(out_data, (a,), backward_fn, "tanh")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow for large |x|."""
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward_fn(g):
        # derivative is the logistic sigmoid, in a form stable for large |x|
        sig = np.empty_like(x)
        pos = x >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return [(a, g * sig)]

    return op_node(out_data.astype(x.dtype), (a,), backward_fn, "softplus")


# -- structural ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeMismatch(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner extents disagree: {a.shape} @ {b.shape}")

    def backward_fn(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return op_node(a.data @ b.data, (a, b), backward_fn, "matmul")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    data = a.data.reshape(shape)

    def backward_fn(g):
        return [(a, g.reshape(a.shape))]

    return op_node(data, (a,), backward_fn, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, offsets, axis=axis)
        return list(zip(tensors, pieces))

    return op_node(data, tensors, backward_fn, "concat")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # accumulate in float64 to bound drift, then return the input dtype
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def backward_fn(g):
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape) * np.ones((), dtype=a.dtype))]
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g_exp, a.shape).astype(a.dtype, copy=True))]

    return op_node(np.asarray(data), (a,), backward_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- backward pass -----------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable tensor
    that requires a gradient.

    Gradients add onto whatever is already in ``.grad``; running backward
    twice without :meth:`Tensor.zero_grad` doubles them.  Constants never
    receive a gradient.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    flows = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        for parent, contrib in node._backward_fn(g):
            if not (parent.requires_grad or parent._backward_fn is not None):
                continue
            prev = flows.get(id(parent))
            flows[id(parent)] = contrib if prev is None else prev + contrib


# -- gradient verification ---------------------------------------------------


@dataclass
class FlaggedElement:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class FiniteDifferenceReport:
    """Outcome of comparing analytic gradients against central differences."""

    tol: float
    checked: int = 0
    kinks_excluded: int = 0
    flagged: list = field(default_factory=list)
    max_rel_err: float = 0.0

    @property
    def compared(self) -> int:
        return self.checked - self.kinks_excluded

    @property
    def fraction_ok(self) -> float:
        if self.compared == 0:
            return 1.0
        return 1.0 - len(self.flagged) / self.compared

    def passed(self, min_fraction: float = 0.99) -> bool:
        return self.fraction_ok >= min_fraction

    def summary(self) -> str:
        return (
            f"{self.compared}/{self.checked} elements compared "
            f"({self.kinks_excluded} kink-adjacent excluded), "
            f"{len(self.flagged)} over tol={self.tol:g}, "
            f"max rel err {self.max_rel_err:.3g}"
        )


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable,
    eps: float = 1e-2,
    tol: float = 1e-3,
    max_per_param: Optional[int] = None,
    seed: int = 0,
    kink_tol: float = 0.2,
    rel_floor: float = 1e-6,
) -> FiniteDifferenceReport:
    """Compare analytic gradients of ``loss_fn`` with central differences.

    ``params`` is a sequence of tensors or (name, tensor) pairs; each listed
    tensor is perturbed elementwise (optionally a seeded random subsample of
    ``max_per_param`` elements).  Elements sitting next to a non-differentiable
    point, detected by disagreement between the left and right difference
    quotients, are excluded from the comparison rather than flagged.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            named.append(p)
        else:
            named.append((f"param{i}", p))

    for _, p in named:
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named}
    f0 = float(loss_fn().item())

    rng = np.random.default_rng(seed)
    report = FiniteDifferenceReport(tol=tol)
    for name, p in named:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_per_param is not None and n > max_per_param:
            idxs = rng.choice(n, size=max_per_param, replace=False)
        else:
            idxs = np.arange(n)
        a_flat = analytic[name].reshape(-1)
        for j in idxs:
            j = int(j)
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(loss_fn().item())
            flat[j] = orig - eps
            f_minus = float(loss_fn().item())
            flat[j] = orig

            report.checked += 1
            d_plus = (f_plus - f0) / eps
            d_minus = (f0 - f_minus) / eps
            if abs(d_plus - d_minus) > kink_tol * max(abs(d_plus), abs(d_minus), rel_floor):
                report.kinks_excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            report.max_rel_err = max(report.max_rel_err, rel)
            if rel > tol:
                report.flagged.append(FlaggedElement(name, j, a, numeric, rel))
    return report
