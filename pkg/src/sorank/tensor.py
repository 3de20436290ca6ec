"""Minimal dense tensor with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 for training, float64 for gradient
verification). Every differentiable operation records its inputs so that
``backward`` on a scalar loss can propagate gradients through the whole
graph. Gradients accumulate by summation when a tensor is used more than
once.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import ndtr  # standard normal CDF, vectorized

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "tensor",
    "matmul",
    "conv2d",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "smooth_l1",
    "embedding",
    "concat",
    "narrow",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward on a non-scalar)."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None,
                 name=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
            if data.dtype not in (np.float32, np.float64):
                data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self):
        """Row-major flat view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Leaf tensor sharing the same values, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- graph ---------------------------------------------------------

    def _needs_graph(self) -> bool:
        return _GRAD_ENABLED and (self.requires_grad or bool(self._parents))

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _wrap(other, self.dtype) * -1.0)

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), self * -1.0)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return self * (1.0 / other)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    @property
    def T(self):
        return transpose(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _make(data, parents, backward) -> Tensor:
    if _GRAD_ENABLED and any(p._needs_graph() for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


# -- elementwise -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a._needs_graph():
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b._needs_graph():
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a._needs_graph():
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b._needs_graph():
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def backward(g):
        if a._needs_graph():
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        if x._needs_graph():
            x._accumulate(g * mask)

    return _make(out_data, (x,), backward)


_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact x * Phi(x) with Phi the standard normal CDF."""
    phi = ndtr(x.data)
    out_data = x.data * phi

    def backward(g):
        if x._needs_graph():
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x._accumulate(g * (phi + x.data * pdf))

    return _make(out_data.astype(x.dtype, copy=False), (x,), backward)


# -- shape manipulation ------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def backward(g):
        if x._needs_graph():
            x._accumulate(g.reshape(old_shape))

    return _make(out_data, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.data.shape}")
    out_data = x.data.T.copy()

    def backward(g):
        if x._needs_graph():
            x._accumulate(g.T)

    return _make(out_data, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t._needs_graph():
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tensors, backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = x.data[idx].copy()

    def backward(g):
        if x._needs_graph():
            full = np.zeros_like(x.data)
            full[idx] = g
            x._accumulate(full)

    return _make(out_data, (x,), backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    out_data = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if x._needs_graph():
            if axis is None:
                x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            else:
                x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _make(out_data, (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis) * (1.0 / n)


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a._needs_graph():
            a._accumulate(g @ b.data.T)
        if b._needs_graph():
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), backward)


# -- convolution -------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation with per-output-channel bias.

    ``x`` is [C,H,W] or batched [N,C,H,W]; ``weight`` is [Co,Ci,k,k];
    ``bias`` is [Co]. Output spatial size floor((H+2p-k)/s)+1 must be >= 1.
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    N, C, H, W = xd.shape
    Co, Ci, k, k2 = weight.data.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError(f"kernel must be square with odd size, got {k}x{k2}")
    if Ci != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, kernel {Ci}")
    h_out = (H + 2 * pad - k) // stride + 1
    w_out = (W + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d output size {h_out}x{w_out} non-positive for input "
            f"{H}x{W}, kernel {k}, stride {stride}, pad {pad}")

    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    # [N, C, h_out, w_out, k, k] strided window view (no copy)
    view = np.lib.stride_tricks.sliding_window_view(
        xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(view, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))  # [N, Co, Ho, Wo]
    out += bias.data.reshape(1, Co, 1, 1)
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g                      # [N, Co, Ho, Wo]
        if bias._needs_graph():
            bias._accumulate(gd.sum(axis=(0, 2, 3)))
        if weight._needs_graph():
            gw = np.tensordot(gd, view, axes=([0, 2, 3], [0, 2, 3]))
            weight._accumulate(gw)                          # [Co, C, k, k]
        if x._needs_graph():
            # [C, k, k, N, Ho, Wo] -> [N, C, k, k, Ho, Wo]
            gcols = np.tensordot(weight.data, gd, axes=([0], [1]))
            gcols = np.ascontiguousarray(gcols.transpose(3, 0, 1, 2, 4, 5))
            gxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=xd.dtype)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * h_out:stride,
                        dj:dj + stride * w_out:stride] += gcols[:, :, di, dj]
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out, (x, weight, bias), backward)


# -- normalization and losses -----------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x._needs_graph():
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma._needs_graph():
            gamma._accumulate(
                (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        if beta._needs_graph():
            beta._accumulate(g.sum(axis=tuple(range(g.ndim - 1))))
        if x._needs_graph():
            d = x.data.shape[-1]
            gx = g * gamma.data
            term1 = gx
            term2 = gx.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (term1 - term2 - term3))

    return _make(out_data, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise IndexError(f"target class out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out_data = np.asarray(-logp[np.arange(n), targets].mean())

    def backward(g):
        if logits._needs_graph():
            p = np.exp(logp)
            p[np.arange(n), targets] -= 1.0
            logits._accumulate(g * p / n)

    return _make(out_data.astype(logits.dtype), (logits,), backward)


def smooth_l1(pred: Tensor, target: Tensor, beta: float = 1.0) -> Tensor:
    """Mean Huber penalty: 0.5 d^2/beta inside |d|<beta, |d|-0.5 beta outside."""
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"smooth_l1 shape mismatch: {pred.data.shape} vs {target.data.shape}")
    if beta <= 0:
        raise ValueError("smooth_l1 beta must be positive")
    d = pred.data - target.data
    ad = np.abs(d)
    quad = ad < beta
    vals = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    out_data = np.asarray(vals.mean())

    def backward(g):
        dloss = np.where(quad, d / beta, np.sign(d)) / d.size
        if pred._needs_graph():
            pred._accumulate(g * dloss)
        if target._needs_graph():
            target._accumulate(-g * dloss)

    return _make(out_data.astype(pred.dtype), (pred, target), backward)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup; gradients scatter-add into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= table.data.shape[0]:
        raise IndexError(
            f"embedding index out of range [0, {table.data.shape[0]})")
    out_data = table.data[idx]

    def backward(g):
        if table._needs_graph():
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table._accumulate(gt)

    return _make(out_data, (table,), backward)
