"""Neural-network building blocks and the three model builders.

Convolutions are im2col-based: patches are gathered with k*k strided slice
assignments, the contraction itself is a batched matmul, and the scatter-add
inverse (col2im) provides both the convolution backward-data map and the
forward pass of the transposed convolution, which keeps the two exact adjoints
of each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, op_node
from .errors import BatchTooSmall, ShapeMismatch
from .profiles import Profile, get_profile

# largest per-layer patch matrix worth holding alive between forward and
# backward; anything bigger is rebuilt on demand to bound peak memory
_PATCH_CACHE_BYTES = 64 * 1024 * 1024

# -- spatial geometry --------------------------------------------------------


def _axis_pads(size: int, k: int, stride: int, padding: str):
    """(pad_before, pad_after, out_size) for one spatial axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    if padding == "valid":
        if size < k:
            raise ShapeMismatch(f"kernel {k} does not fit extent {size} without padding")
        return 0, 0, (size - k) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


@dataclass(frozen=True)
class _Geometry:
    """Padding amounts and output extents shared by im2col and col2im."""

    pt: int
    pb: int
    pl: int
    pr: int
    oh: int
    ow: int
    kh: int
    kw: int
    stride: int


def _geometry(h, w, kh, kw, stride, padding) -> _Geometry:
    pt, pb, oh = _axis_pads(h, kh, stride, padding)
    pl, pr, ow = _axis_pads(w, kw, stride, padding)
    return _Geometry(pt, pb, pl, pr, oh, ow, kh, kw, stride)


def _im2col(x: np.ndarray, g: _Geometry, fill: float = 0.0) -> np.ndarray:
    """Gather sliding windows into [n, c, kh, kw, oh, ow]."""
    n, c = x.shape[:2]
    if g.pt or g.pb or g.pl or g.pr:
        x = np.pad(x, ((0, 0), (0, 0), (g.pt, g.pb), (g.pl, g.pr)), constant_values=fill)
    cols = np.empty((n, c, g.kh, g.kw, g.oh, g.ow), dtype=x.dtype)
    s = g.stride
    for i in range(g.kh):
        for j in range(g.kw):
            cols[:, :, i, j] = x[:, :, i : i + (g.oh - 1) * s + 1 : s, j : j + (g.ow - 1) * s + 1 : s]
    return cols


def _col2im(cols: np.ndarray, h: int, w: int, g: _Geometry) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col`; cols is [n, c, kh, kw, oh, ow]."""
    n, c = cols.shape[:2]
    out = np.zeros((n, c, h + g.pt + g.pb, w + g.pl + g.pr), dtype=cols.dtype)
    s = g.stride
    for i in range(g.kh):
        for j in range(g.kw):
            out[:, :, i : i + (g.oh - 1) * s + 1 : s, j : j + (g.ow - 1) * s + 1 : s] += cols[:, :, i, j]
    return out[:, :, g.pt : g.pt + h, g.pl : g.pl + w]


def _im2col_flat(x: np.ndarray, g: _Geometry) -> np.ndarray:
    """Gather sliding windows straight into the [c*kh*kw, n*oh*ow] GEMM layout."""
    n, c = x.shape[:2]
    if g.pt or g.pb or g.pl or g.pr:
        x = np.pad(x, ((0, 0), (0, 0), (g.pt, g.pb), (g.pl, g.pr)))
    xt = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    cols = np.empty((c, g.kh, g.kw, n, g.oh, g.ow), dtype=x.dtype)
    s = g.stride
    for i in range(g.kh):
        for j in range(g.kw):
            cols[:, i, j] = xt[:, :, i : i + (g.oh - 1) * s + 1 : s, j : j + (g.ow - 1) * s + 1 : s]
    return cols.reshape(c * g.kh * g.kw, n * g.oh * g.ow)


def _col2im_flat(cols: np.ndarray, n: int, c: int, h: int, w: int, g: _Geometry) -> np.ndarray:
    """Scatter-add inverse of :func:`_im2col_flat` back to an [n, c, h, w] image."""
    cols = cols.reshape(c, g.kh, g.kw, n, g.oh, g.ow)
    out = np.zeros((c, n, h + g.pt + g.pb, w + g.pl + g.pr), dtype=cols.dtype)
    s = g.stride
    for i in range(g.kh):
        for j in range(g.kw):
            out[:, :, i : i + (g.oh - 1) * s + 1 : s, j : j + (g.ow - 1) * s + 1 : s] += cols[:, i, j]
    return np.ascontiguousarray(out[:, :, g.pt : g.pt + h, g.pl : g.pl + w].transpose(1, 0, 2, 3))


# -- convolution -------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-d convolution; x is [n,c,h,w], w is [filters, c, kh, kw], b is [filters]."""
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weights, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeMismatch(f"input has {c} channels but weights expect {ci}")
    g = _geometry(h, wd, kh, kw, stride, padding)
    length = g.oh * g.ow

    # one flat [c*kh*kw, n*oh*ow] operand turns the whole batch into a single
    # GEMM; the transpose copy is cheaper than n tiny matmuls
    w2 = w.data.reshape(co, c * kh * kw)
    cols = _im2col_flat(x.data, g)
    out = (w2 @ cols).reshape(co, n, g.oh, g.ow).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)
    # holding patches through the graph costs [c*k*k, n*oh*ow] floats; keep
    # them only when small, otherwise recompute in the weight-gradient path
    keep = cols if cols.nbytes <= _PATCH_CACHE_BYTES else None
    cols = None
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(grad):
        gf = grad.transpose(1, 0, 2, 3).reshape(co, n * length)
        grads = []
        if x.requires_grad:
            grads.append((x, _col2im_flat(w2.T @ gf, n, c, h, wd, g)))
        if w.requires_grad:
            cols_b = keep if keep is not None else _im2col_flat(x.data, g)
            grads.append((w, (gf @ cols_b.T).reshape(w.shape)))
        if b is not None and b.requires_grad:
            grads.append((b, grad.sum(axis=(0, 2, 3))))
        return grads

    return op_node(out, parents, backward_fn, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2,
                     padding: str = "same") -> Tensor:
    """Transposed convolution: the exact adjoint of :func:`conv2d`.

    x is [n,c,h,w], w is [c, filters, kh, kw].  With 'same' padding the output
    extent is h*stride (the input geometry of the conv this op transposes).
    """
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ShapeMismatch(f"conv_transpose2d expects 4-d operands, got {x.shape}, {w.shape}")
    n, ci, h, wd = x.shape
    wi, co, kh, kw = w.shape
    if wi != ci:
        raise ShapeMismatch(f"input has {ci} channels but weights expect {wi}")
    if padding == "same":
        oh, ow = h * stride, wd * stride
    else:
        oh, ow = (h - 1) * stride + kh, (wd - 1) * stride + kw
    g = _geometry(oh, ow, kh, kw, stride, padding)
    if (g.oh, g.ow) != (h, wd):
        raise ShapeMismatch(f"no conv output of extent {(h, wd)} maps onto {(oh, ow)}")
    length = h * wd

    w2 = w.data.reshape(ci, co * kh * kw)
    xf = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(ci, n * length)
    out = _col2im_flat(w2.T @ xf, n, co, oh, ow, g)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(grad):
        gcols = _im2col_flat(grad, g)
        grads = []
        if x.requires_grad:
            dx = (w2 @ gcols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3)
            grads.append((x, np.ascontiguousarray(dx)))
        if w.requires_grad:
            grads.append((w, (xf @ gcols.T).reshape(w.shape)))
        if b is not None and b.requires_grad:
            grads.append((b, grad.sum(axis=(0, 2, 3))))
        return grads

    return op_node(out, parents, backward_fn, "conv_transpose2d")


def maxpool2d(x: Tensor, window: int = 3, stride: int = 2, padding: str = "same") -> Tensor:
    """Max pooling; gradient routes to the first maximal element per window."""
    if len(x.shape) != 4:
        raise ShapeMismatch(f"maxpool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    g = _geometry(h, w, window, window, stride, padding)
    length = g.oh * g.ow
    cols = _im2col(x.data, g, fill=-np.inf).reshape(n, c, window * window, length)
    # argmax picks the first index on ties, scanning windows in reading order
    idx = np.argmax(cols, axis=2).astype(np.int16)
    out = np.take_along_axis(cols, idx[:, :, None, :].astype(np.int64), axis=2)
    out = out.reshape(n, c, g.oh, g.ow)

    def backward_fn(grad):
        dcols = np.zeros((n, c, window * window, length), dtype=grad.dtype)
        np.put_along_axis(dcols, idx[:, :, None, :].astype(np.int64),
                          grad.reshape(n, c, 1, length), axis=2)
        return [(x, _col2im(dcols.reshape(n, c, window, window, g.oh, g.ow), h, w, g))]

    return op_node(out, (x,), backward_fn, "maxpool2d")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine layer [n,d] @ [d,u] + [u]."""
    out = ad.matmul(x, w)
    return out if b is None else out + b


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    if len(x.shape) != 2:
        raise ShapeMismatch(f"softmax expects [n,k] input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def backward_fn(grad):
        inner = (grad * p).sum(axis=1, keepdims=True)
        return [(x, p * (grad - inner))]

    return op_node(p, (x,), backward_fn, "softmax")


# -- batch normalization -----------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics updated in train mode and consumed in eval mode."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool = True, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over batch and spatial axes."""
    if len(x.shape) != 4:
        raise ShapeMismatch(f"batchnorm2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"gamma/beta must be [{c}], got {gamma.shape}, {beta.shape}")

    if train:
        if n < 2:
            raise BatchTooSmall(f"train-mode batchnorm needs n >= 2, got {n}")
        mu64 = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var64 = x.data.astype(np.float64).var(axis=(0, 2, 3))
        state.running_mean[...] = momentum * state.running_mean + (1 - momentum) * mu64
        state.running_var[...] = momentum * state.running_var + (1 - momentum) * var64
        mu = mu64.astype(x.dtype)
        inv = (1.0 / np.sqrt(var64 + eps)).astype(x.dtype)
    else:
        mu = state.running_mean.astype(x.dtype)
        inv = (1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)).astype(x.dtype)

    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(grad):
        grads = []
        if gamma.requires_grad:
            grads.append((gamma, (grad * xhat).sum(axis=(0, 2, 3))))
        if beta.requires_grad:
            grads.append((beta, grad.sum(axis=(0, 2, 3))))
        if x.requires_grad:
            gscaled = grad * gamma.data[None, :, None, None]
            if train:
                m = n * h * w
                s1 = gscaled.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gscaled * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = inv[None, :, None, None] / m * (m * gscaled - s1 - xhat * s2)
            else:
                dx = gscaled * inv[None, :, None, None]
            grads.append((x, dx))
        return grads

    return op_node(out, (x, gamma, beta), backward_fn, "batchnorm2d")


# -- minibatch discrimination ------------------------------------------------


def minibatch_discrimination(f: Tensor, t: Tensor) -> Tensor:
    """Append within-batch similarity features to ``f``.

    f is [n,a]; t is [a,B,C].  Row i is mapped to B matrices M_i of size
    [B,C]; the appended feature b is sum_{j != i} exp(-||M_i,b - M_j,b||_1).
    Output is [n, a+B].
    """
    if len(f.shape) != 2 or len(t.shape) != 3:
        raise ShapeMismatch(f"expects [n,a] features and [a,B,C] kernel, got {f.shape}, {t.shape}")
    n, a = f.shape
    if n < 2:
        raise BatchTooSmall(f"minibatch discrimination needs n >= 2, got {n}")
    if t.shape[0] != a:
        raise ShapeMismatch(f"features have width {a} but kernel expects {t.shape[0]}")
    bk, cd = t.shape[1], t.shape[2]

    t2 = t.data.reshape(a, bk * cd)
    m = (f.data @ t2).reshape(n, bk, cd)
    diff = m[:, None] - m[None, :]                      # [n, n, B, C]
    e = np.exp(-np.abs(diff).sum(axis=3))               # [n, n, B]
    o = (e.sum(axis=1) - 1.0).astype(f.dtype)           # drop the self term exp(0)
    out = np.concatenate([f.data, o], axis=1)

    def backward_fn(grad):
        gf = grad[:, :a]
        go = grad[:, a:]
        # d/dM_i = -sum_j E_ij * (go_i + go_j) * sign(M_i - M_j); the diagonal
        # vanishes because sign(0) = 0
        pair = e * (go[:, None, :] + go[None, :, :])
        dm = -(pair[..., None] * np.sign(diff)).sum(axis=1)
        dm2 = dm.reshape(n, bk * cd)
        grads = []
        if f.requires_grad:
            grads.append((f, gf + dm2 @ t2.T))
        if t.requires_grad:
            grads.append((t, (f.data.T @ dm2).reshape(t.shape)))
        return grads

    return op_node(out, (f, t), backward_fn, "minibatch_discrimination")


# -- model specifications ----------------------------------------------------

LAYER_KINDS = {
    "conv", "conv_transpose", "maxpool", "dense", "relu", "leaky_relu", "tanh",
    "softmax", "batchnorm", "minibatch_disc", "flatten", "reshape",
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 0
    stride: int = 1
    padding: str = "same"
    units: int = 0
    b_kernels: int = 0
    c_dims: int = 0
    slope: float = 0.2
    target: tuple = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "conv_transpose") and (self.filters <= 0 or self.kernel <= 0):
            raise ValueError(f"{self.kind} needs positive filters and kernel")
        if self.kind == "maxpool" and self.kernel <= 0:
            raise ValueError("maxpool needs a positive window")
        if self.kind == "dense" and self.units <= 0:
            raise ValueError("dense needs positive units")
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack with enough shape information to allocate weights."""

    name: str
    input_shape: tuple          # (c, h, w) for images, (d,) for vectors
    layers: tuple
    init: str = "he"            # 'he' or 'dcgan' weight initialization

    def shape_walk(self) -> list:
        """Per-layer output shapes (without the batch axis)."""
        shapes = []
        cur = tuple(self.input_shape)
        for spec in self.layers:
            cur = _next_shape(cur, spec)
            shapes.append(cur)
        return shapes

    @property
    def output_shape(self) -> tuple:
        return self.shape_walk()[-1]

    def param_shapes(self) -> list:
        """(name, shape) for every trainable tensor, in layer order."""
        out = []
        cur = tuple(self.input_shape)
        for i, spec in enumerate(self.layers):
            key = f"{i:02d}_{spec.kind}"
            if spec.kind == "conv":
                out.append((f"{key}.w", (spec.filters, cur[0], spec.kernel, spec.kernel)))
                out.append((f"{key}.b", (spec.filters,)))
            elif spec.kind == "conv_transpose":
                out.append((f"{key}.w", (cur[0], spec.filters, spec.kernel, spec.kernel)))
                out.append((f"{key}.b", (spec.filters,)))
            elif spec.kind == "dense":
                out.append((f"{key}.w", (cur[0], spec.units)))
                out.append((f"{key}.b", (spec.units,)))
            elif spec.kind == "batchnorm":
                out.append((f"{key}.gamma", (cur[0],)))
                out.append((f"{key}.beta", (cur[0],)))
            elif spec.kind == "minibatch_disc":
                out.append((f"{key}.t", (cur[0], spec.b_kernels, spec.c_dims)))
            cur = _next_shape(cur, spec)
        return out

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def build(self, seed: int, dtype=np.float32) -> "Network":
        return Network(self, seed, dtype=dtype)


def _next_shape(cur: tuple, spec: LayerSpec) -> tuple:
    kind = spec.kind
    if kind == "conv":
        c, h, w = cur
        g = _geometry(h, w, spec.kernel, spec.kernel, spec.stride, spec.padding)
        return (spec.filters, g.oh, g.ow)
    if kind == "conv_transpose":
        c, h, w = cur
        if spec.padding == "same":
            return (spec.filters, h * spec.stride, w * spec.stride)
        return (spec.filters, (h - 1) * spec.stride + spec.kernel,
                (w - 1) * spec.stride + spec.kernel)
    if kind == "maxpool":
        c, h, w = cur
        g = _geometry(h, w, spec.kernel, spec.kernel, spec.stride, spec.padding)
        return (c, g.oh, g.ow)
    if kind == "dense":
        return (spec.units,)
    if kind == "flatten":
        return (int(np.prod(cur)),)
    if kind == "reshape":
        if int(np.prod(spec.target)) != int(np.prod(cur)):
            raise ShapeMismatch(f"cannot reshape {cur} into {spec.target}")
        return tuple(spec.target)
    if kind == "minibatch_disc":
        return (cur[0] + spec.b_kernels,)
    return cur  # relu, leaky_relu, tanh, softmax, batchnorm


class Network:
    """A ModelSpec instantiated with parameter tensors and batchnorm state."""

    def __init__(self, spec: ModelSpec, seed: int, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: dict = {}
        self.bn_states: dict = {}
        cur = tuple(spec.input_shape)
        for i, layer in enumerate(spec.layers):
            key = f"{i:02d}_{layer.kind}"
            if layer.kind == "conv":
                shape = (layer.filters, cur[0], layer.kernel, layer.kernel)
                fan_in = cur[0] * layer.kernel * layer.kernel
                self.params[f"{key}.w"] = self._weight(rng, shape, fan_in, spec.init, dtype)
                self.params[f"{key}.b"] = Tensor(np.zeros(layer.filters), True, dtype=dtype)
            elif layer.kind == "conv_transpose":
                shape = (cur[0], layer.filters, layer.kernel, layer.kernel)
                fan_in = cur[0] * layer.kernel * layer.kernel
                self.params[f"{key}.w"] = self._weight(rng, shape, fan_in, spec.init, dtype)
                self.params[f"{key}.b"] = Tensor(np.zeros(layer.filters), True, dtype=dtype)
            elif layer.kind == "dense":
                shape = (cur[0], layer.units)
                self.params[f"{key}.w"] = self._weight(rng, shape, cur[0], spec.init, dtype)
                self.params[f"{key}.b"] = Tensor(np.zeros(layer.units), True, dtype=dtype)
            elif layer.kind == "batchnorm":
                self.params[f"{key}.gamma"] = Tensor(np.ones(cur[0]), True, dtype=dtype)
                self.params[f"{key}.beta"] = Tensor(np.zeros(cur[0]), True, dtype=dtype)
                self.bn_states[i] = BatchNormState.create(cur[0])
            elif layer.kind == "minibatch_disc":
                shape = (cur[0], layer.b_kernels, layer.c_dims)
                self.params[f"{key}.t"] = self._weight(rng, shape, cur[0], spec.init, dtype)
            cur = _next_shape(cur, layer)

    @staticmethod
    def _weight(rng, shape, fan_in, init, dtype) -> Tensor:
        if init == "dcgan":
            std = 0.02
        else:
            std = float(np.sqrt(2.0 / fan_in))
        data = rng.normal(0.0, std, size=shape)
        return Tensor(data, requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        cur = x
        for i, layer in enumerate(self.spec.layers):
            key = f"{i:02d}_{layer.kind}"
            if layer.kind == "conv":
                cur = conv2d(cur, self.params[f"{key}.w"], self.params[f"{key}.b"],
                             stride=layer.stride, padding=layer.padding)
            elif layer.kind == "conv_transpose":
                cur = conv_transpose2d(cur, self.params[f"{key}.w"], self.params[f"{key}.b"],
                                       stride=layer.stride, padding=layer.padding)
            elif layer.kind == "maxpool":
                cur = maxpool2d(cur, window=layer.kernel, stride=layer.stride,
                                padding=layer.padding)
            elif layer.kind == "dense":
                cur = dense(cur, self.params[f"{key}.w"], self.params[f"{key}.b"])
            elif layer.kind == "batchnorm":
                cur = batchnorm2d(cur, self.params[f"{key}.gamma"], self.params[f"{key}.beta"],
                                  self.bn_states[i], train=train)
            elif layer.kind == "minibatch_disc":
                cur = minibatch_discrimination(cur, self.params[f"{key}.t"])
            elif layer.kind == "relu":
                cur = ad.relu(cur)
            elif layer.kind == "leaky_relu":
                cur = ad.leaky_relu(cur, layer.slope)
            elif layer.kind == "tanh":
                cur = ad.tanh(cur)
            elif layer.kind == "softmax":
                cur = softmax(cur)
            elif layer.kind == "flatten":
                cur = cur.reshape(cur.shape[0], -1)
            elif layer.kind == "reshape":
                cur = cur.reshape((cur.shape[0],) + tuple(layer.target))
        return cur

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        return self.forward(x, train=train)

    def parameters(self) -> list:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- state transfer (checkpointing, freezing) ----------------------------

    def state_arrays(self) -> dict:
        """All persistent arrays: parameters plus batchnorm running stats."""
        out = {f"param/{name}": p.data.copy() for name, p in self.params.items()}
        for i, st in self.bn_states.items():
            out[f"bn/{i:02d}/running_mean"] = st.running_mean.copy()
            out[f"bn/{i:02d}/running_var"] = st.running_var.copy()
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self.params.items():
            src = arrays[f"param/{name}"]
            if src.shape != p.data.shape:
                raise ShapeMismatch(f"checkpoint tensor {name} has shape {src.shape}, "
                                    f"expected {p.data.shape}")
            p.data = np.asarray(src, dtype=self.dtype).copy()
            p.grad = None
        for i, st in self.bn_states.items():
            st.running_mean[...] = arrays[f"bn/{i:02d}/running_mean"]
            st.running_var[...] = arrays[f"bn/{i:02d}/running_var"]


# -- builders ----------------------------------------------------------------


def _resolve(profile) -> Profile:
    return get_profile(profile) if isinstance(profile, str) else profile


def build_classifier(profile, output_units: Optional[int] = None) -> ModelSpec:
    """Conv-pool-conv-pool-dense classifier ending in a softmax.

    The default head jointly covers all tasks (classes_per_task * num_tasks
    units); pass ``output_units`` for a shared head of another width.
    """
    p = _resolve(profile)
    f1, f2, f3, f4 = p.conv_filters
    k = p.conv_kernel
    if output_units is None:
        output_units = p.joint_output_units
    layers = [
        LayerSpec("conv", filters=f1, kernel=k, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("conv", filters=f2, kernel=k, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=p.pool_window, stride=p.pool_stride),
        LayerSpec("conv", filters=f3, kernel=k, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("conv", filters=f4, kernel=k, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=p.pool_window, stride=p.pool_stride),
        LayerSpec("flatten"),
        LayerSpec("dense", units=p.dense_units[0]),
        LayerSpec("relu"),
        LayerSpec("dense", units=p.dense_units[1]),
        LayerSpec("relu"),
        LayerSpec("dense", units=output_units),
        LayerSpec("softmax"),
    ]
    return ModelSpec(name=f"classifier-{p.name}",
                     input_shape=(p.image_channels, p.crop_hw, p.crop_hw),
                     layers=tuple(layers), init="he")


def build_generator(profile) -> ModelSpec:
    """Latent vector to image: dense projection, then stride-2 deconv stack
    with batchnorm and ReLU, ending in tanh."""
    p = _resolve(profile)
    ch0 = p.gen_project_channels
    hw0 = p.gen_project_hw
    layers = [
        LayerSpec("dense", units=ch0 * hw0 * hw0),
        LayerSpec("reshape", target=(ch0, hw0, hw0)),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
    ]
    for ch in p.gen_channels:
        layers += [
            LayerSpec("conv_transpose", filters=ch, kernel=p.gan_kernel, stride=2),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
        ]
    layers += [
        LayerSpec("conv_transpose", filters=p.image_channels, kernel=p.gan_kernel, stride=2),
        LayerSpec("tanh"),
    ]
    spec = ModelSpec(name=f"generator-{p.name}", input_shape=(p.latent_dim,),
                     layers=tuple(layers), init="dcgan")
    assert spec.output_shape == (p.image_channels, p.gan_hw, p.gan_hw)
    return spec


def build_discriminator(profile) -> ModelSpec:
    """Image to real/fake logit: stride-2 convs with leaky ReLU, batchnorm on
    all but the first, then minibatch discrimination before the logit."""
    p = _resolve(profile)
    layers = []
    for i, ch in enumerate(p.disc_channels):
        layers.append(LayerSpec("conv", filters=ch, kernel=p.gan_kernel, stride=2))
        if i > 0:
            layers.append(LayerSpec("batchnorm"))
        layers.append(LayerSpec("leaky_relu", slope=p.leak_slope))
    layers += [
        LayerSpec("flatten"),
        LayerSpec("minibatch_disc", b_kernels=p.mbd_kernels, c_dims=p.mbd_dims),
        LayerSpec("dense", units=1),
    ]
    return ModelSpec(name=f"discriminator-{p.name}",
                     input_shape=(p.image_channels, p.gan_hw, p.gan_hw),
                     layers=tuple(layers), init="dcgan")
