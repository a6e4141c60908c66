"""Dense tensors with reverse-mode automatic differentiation.

Everything the network computes runs through the :class:`Tensor` type in
this module: values are numpy arrays, every operation records its parents
and an adjoint closure, and ``backward`` on a scalar sweeps the recorded
graph once in reverse topological order. Training runs in float32; gradient
checking switches the whole graph to float64.

Attention masks use the finite sentinel :data:`BLOCKED` instead of ``-inf``
so that gradients stay finite everywhere.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _sp_special

from .errors import DimensionError, PreconditionError

# Additive attention-mask sentinel: large, negative, and finite. exp() of a
# shifted logit at this magnitude underflows to exactly 0.0 in both float32
# and float64, so blocked positions get probability 0 and zero gradient.
BLOCKED = -1.0e9

_grad_enabled = True

# op name -> factor applied to that op's output adjoint before propagation.
# Used only by the verification harness to prove the finite-difference
# checker catches a wrong adjoint.
_adjoint_sabotage: dict[str, float] = {}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (eval-mode forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def sabotage_adjoint(op: str, scale: float = 1.05):
    """Corrupt the adjoint of ``op`` by ``scale`` inside the block.

    Test fixture for the gradient-check harness: a correct checker must
    report a large error while this is active.
    """
    _adjoint_sabotage[op] = scale
    try:
        yield
    finally:
        _adjoint_sabotage.pop(op, None)


class Tensor:
    """A dense n-d array participating in a differentiation graph.

    ``data`` is always a numpy float array. ``grad`` is lazily allocated by
    ``backward`` and has the same shape as ``data``. Graphs are single-use:
    calling ``backward`` twice on the same root raises.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_op", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op: str | None = None
        self._backward_ran = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ----------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-accumulate gradients of this scalar into all leaves.

        Each graph node is visited exactly once, in reverse topological
        order; leaf gradients accumulate additively across uses. Graphs are
        single-use: a second call on the same root raises.
        """
        if self.size != 1:
            raise PreconditionError(
                f"backward requires a scalar root, got shape {self.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran on this root; graphs are single-use")
        if self._backward_fn is None and not self.requires_grad:
            raise RuntimeError("root is detached from any recorded graph")
        self._backward_ran = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            fn = node._backward_fn
            if fn is None:
                continue
            g = node.grad
            if node._op in _adjoint_sabotage:
                g = g * _adjoint_sabotage[node._op]
            fn(g)
            # Intermediate grads are not needed after propagation.
            if node is not self and node._parents:
                node.grad = None

    def _accum(self, g: np.ndarray, own: bool = False) -> None:
        # ``own=True`` promises g is a fresh array no one else will mutate,
        # so the first accumulation can adopt it without a defensive copy.
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and
                       isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative DFS postorder, reversed: root first, leaves last."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            ga = _unbroadcast(g, a.shape)
            a._accum(ga, own=ga is not g)
        if b.requires_grad or b._parents:
            gb = _unbroadcast(g, b.shape)
            b._accum(gb, own=gb is not g)

    return _make(out, (a, b), "add", bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            ga = _unbroadcast(g, a.shape)
            a._accum(ga, own=ga is not g)
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(-g, b.shape), own=True)

    return _make(out, (a, b), "sub", bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g * b.data, a.shape), own=True)
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(out, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad or a._parents:
            a._accum(_unbroadcast(g / b.data, a.shape), own=True)
        if b.requires_grad or b._parents:
            b._accum(_unbroadcast(-g * out / b.data, b.shape), own=True)

    return _make(out, (a, b), "div", bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(-g, own=True)

    return _make(-a.data, (a,), "neg", bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy's stacked-matmul broadcasting.

    Adjoints: dA = dC @ Bᵀ, dB = Aᵀ @ dC (transposes on the two trailing
    axes, broadcast leading axes summed out).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents do not match for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad or a._parents:
            if b.ndim == 2:
                ga = np.matmul(g, b.data.T)
            else:
                ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a._accum(_unbroadcast(ga, a.shape), own=True)
        if b.requires_grad or b._parents:
            if b.ndim == 2 and a.ndim > 2:
                # Weight shared across leading dims: one large GEMM.
                k = a.shape[-1]
                n = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b._accum(_unbroadcast(gb, b.shape), own=True)

    return _make(out, (a, b), "matmul", bwd)


# -- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape

    def bwd(g):
        a._accum(g.reshape(src))

    return _make(a.data.reshape(shape), (a,), "reshape", bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        gt = np.ascontiguousarray(g.transpose(inv))
        a._accum(gt, own=gt is not g)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose", bwd)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape

    def bwd(g):
        ga = _unbroadcast(g, src)
        a._accum(ga, own=ga is not g)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to", bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _make(out, tensors, "concat", bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    pos_axis = axis if axis >= 0 else out.ndim + axis

    def bwd(g):
        moved = np.moveaxis(g, pos_axis, 0)
        for i, t in enumerate(tensors):
            if t.requires_grad or t._parents:
                t._accum(moved[i])

    return _make(out, tensors, "stack", bwd)


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing with scatter-style adjoint."""
    out = a.data[idx]
    src_shape = a.shape

    def bwd(g):
        full = np.zeros(src_shape, dtype=g.dtype)
        full[idx] = g
        a._accum(full, own=True)

    return _make(np.ascontiguousarray(out), (a,), "take", bwd)


# -- reductions --------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src_shape = a.shape

    def bwd(g):
        if axis is None:
            a._accum(np.broadcast_to(g, src_shape).astype(g.dtype, copy=True),
                     own=True)
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, src_shape).copy(), own=True)

    return _make(np.asarray(out), (a,), "sum", bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        a._accum(g * out, own=True)

    return _make(out, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data, own=True)

    return _make(out, (a,), "log", bwd)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        a._accum(g * (0.5 / out), own=True)

    return _make(out, (a,), "sqrt", bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        a._accum(g * (a.data > 0), own=True)

    return _make(out, (a,), "relu", bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = _sp_special.expit(a.data)

    def bwd(g):
        a._accum(g * out * (1.0 - out), own=True)

    return _make(out, (a,), "sigmoid", bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x), with Phi evaluated via erf."""
    x = a.data
    phi = 0.5 * (1.0 + _sp_special.erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        a._accum(g * (phi + x * pdf), own=True)

    return _make(out.astype(x.dtype, copy=False), (a,), "gelu", bwd)


def activation(a: Tensor, kind: str) -> Tensor:
    """Dispatch on kind: one of ``gelu``, ``relu``, ``sigmoid``."""
    try:
        return {"gelu": gelu, "relu": relu, "sigmoid": sigmoid}[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        a._accum(g * ((a.data >= lo) & (a.data <= hi)), own=True)

    return _make(out, (a,), "clip", bwd)


# -- softmax / layer norm -----------------------------------------------------


def _softmax_core(z: np.ndarray) -> np.ndarray:
    """In-place stable softmax along the last axis; returns its argument."""
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax(a: Tensor, scale: float = 1.0) -> Tensor:
    """Softmax of ``a * scale`` along the last axis."""
    z = a.data * scale if scale != 1.0 else a.data.copy()
    y = _softmax_core(z)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        ga = (g - dot) * y
        if scale != 1.0:
            ga *= scale
        a._accum(ga, own=True)

    return _make(y, (a,), "softmax", bwd)


def masked_softmax(logits: Tensor, mask, scale: float = 1.0) -> Tensor:
    """Softmax over ``(logits + mask) * scale`` along the last axis.

    ``mask`` entries are 0 (open) or :data:`BLOCKED`; blocked positions
    receive probability 0. A row with every position blocked is a
    precondition violation and raises instead of silently producing NaN.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if m.shape[-1] != logits.shape[-1]:
        raise DimensionError(
            f"mask last extent {m.shape} does not match logits {logits.shape}")
    if not np.all((m == 0).any(axis=-1)):
        raise PreconditionError("masked_softmax: some row has every position blocked")
    z = logits.data + m
    if scale != 1.0:
        z *= scale
    y = _softmax_core(z)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        ga = (g - dot) * y
        if scale != 1.0:
            ga *= scale
        logits._accum(ga, own=True)

    return _make(y, (logits,), "masked_softmax", bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply the affine (gain, bias)."""
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs at least one feature")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad or gain._parents:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0), own=True)
        if bias.requires_grad or bias._parents:
            bias._accum(g.reshape(-1, d).sum(axis=0), own=True)
        if x.requires_grad or x._parents:
            gy = g * gain.data
            t1 = gy.mean(axis=-1, keepdims=True)
            t2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accum((gy - t1 - xhat * t2) * inv, own=True)

    return _make(out, (x, gain, bias), "layer_norm", bwd)


# -- convolutions -------------------------------------------------------------


def _conv_out_hw(h: int, wd: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1


def _offset_slice(di: int, dj: int, oh: int, ow: int, stride: int):
    return (slice(di, di + (oh - 1) * stride + 1, stride),
            slice(dj, dj + (ow - 1) * stride + 1, stride))


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation by kernel-offset decomposition.

    x (B,C,H,W), w (Cout,C,k,k) -> (B,Cout,oh,ow). Work runs channel-major
    so each of the k*k kernel offsets is a single (Cout,C) x (C, B*P) GEMM,
    avoiding both an im2col blowup and numpy's stacked-matmul loop.
    """
    b, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    oh, ow = _conv_out_hw(h, wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xcm = xp.transpose(1, 0, 2, 3)                   # (C, B, HP, WP) view
    wk = np.ascontiguousarray(w.transpose(2, 3, 0, 1))   # contiguous for BLAS
    y = np.zeros((cout, b * oh * ow), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            rs, cs = _offset_slice(di, dj, oh, ow, stride)
            xt = xcm[:, :, rs, cs].reshape(c, -1)
            y += np.matmul(wk[di, dj], xt)
    return np.ascontiguousarray(
        y.reshape(cout, b, oh, ow).transpose(1, 0, 2, 3))


def _conv_dx(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
             in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_conv_fwd`` w.r.t. its input; also the tconv forward."""
    b, cout, oh, ow = g.shape
    _, cin, k, _ = w.shape
    h, wd = in_hw
    hp, wp = h + 2 * pad, wd + 2 * pad
    gcm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
    wk = np.ascontiguousarray(w.transpose(2, 3, 1, 0))   # (k, k, Cin, Cout)
    dxp = np.zeros((cin, b, hp, wp), dtype=g.dtype)
    for di in range(k):
        for dj in range(k):
            rs, cs = _offset_slice(di, dj, oh, ow, stride)
            contrib = np.matmul(wk[di, dj], gcm)
            dxp[:, :, rs, cs] += contrib.reshape(cin, b, oh, ow)
    out = dxp[:, :, pad:hp - pad, pad:wp - pad] if pad else dxp
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_dw(x: np.ndarray, g: np.ndarray, stride: int, pad: int,
             k: int) -> np.ndarray:
    """Adjoint of ``_conv_fwd`` w.r.t. its weight."""
    b, c, h, wd = x.shape
    _, cout, oh, ow = g.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
    dw = np.empty((cout, c, k, k), dtype=g.dtype)
    for di in range(k):
        for dj in range(k):
            rs, cs = _offset_slice(di, dj, oh, ow, stride)
            xt = np.ascontiguousarray(
                xp[:, :, rs, cs].transpose(1, 0, 2, 3)).reshape(c, -1)
            dw[:, :, di, dj] = np.matmul(g2, xt.T)
    return dw


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 2,
           pad: int = 1) -> Tensor:
    """Strided cross-correlation over (B, C, H, W) input.

    Kernel extent comes from ``w`` (Cout, Cin, k, k). With the default
    stride 2 / kernel 3 / pad 1 the spatial extents are exactly halved;
    that case requires even H and W.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise DimensionError(
            f"conv2d stride 2 requires even spatial extents, got {x.shape}")
    b, c, h, wd = x.shape
    k = w.shape[2]
    y = _conv_fwd(x.data, w.data, stride, pad)
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        if w.requires_grad or w._parents:
            w._accum(_conv_dw(x.data, g, stride, pad, k), own=True)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accum(g.sum(axis=(0, 2, 3)), own=True)
        if x.requires_grad or x._parents:
            x._accum(_conv_dx(g, w.data, stride, pad, (h, wd)), own=True)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(y, parents, "conv2d", bwd)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None,
                     stride: int = 2, pad: int = 0, out_pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` as a forward op (upsampling layers).

    Weight layout (Cin, Cout, k, k). Spatial growth is
    ``(H - 1) * stride - 2 * pad + k + out_pad``; only kernel/stride/padding
    combinations producing an exact x1 or x2 growth are accepted. ``out_pad``
    zero-fills trailing rows/columns that no window of the paired forward
    conv would touch, which keeps the inner-product adjoint identity exact.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d_transpose expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"conv2d_transpose channel mismatch: input {x.shape} vs weight {w.shape}")
    if not 0 <= out_pad < stride:
        raise DimensionError(f"out_pad={out_pad} must be in [0, stride)")
    b, cin, h, wd = x.shape
    k = w.shape[2]
    oh = (h - 1) * stride - 2 * pad + k + out_pad
    ow = (wd - 1) * stride - 2 * pad + k + out_pad
    if oh not in (h, 2 * h) or ow not in (wd, 2 * wd):
        raise DimensionError(
            f"conv2d_transpose(k={k}, stride={stride}, pad={pad}, out_pad={out_pad}) "
            f"maps {(h, wd)} to {(oh, ow)}; only exact x1/x2 growth is supported")
    # Run the conv adjoint with the conv-side weight view (Cout_conv=Cin here).
    y = _conv_dx(x.data, w.data, stride, pad, (oh, ow))
    if bias is not None:
        y += bias.data.reshape(1, -1, 1, 1)

    def bwd(g):
        # The transposed conv is the conv adjoint, so its own adjoints are
        # plain-conv expressions with g on the conv-input side and x on the
        # conv-output side.
        if x.requires_grad or x._parents:
            x._accum(_conv_fwd(g, w.data, stride, pad), own=True)
        if w.requires_grad or w._parents:
            w._accum(_conv_dw(g, x.data, stride, pad, k), own=True)
        if bias is not None and (bias.requires_grad or bias._parents):
            bias._accum(g.sum(axis=(0, 2, 3)), own=True)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(y, parents, "conv2d_transpose", bwd)


# -- verification -------------------------------------------------------------


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5, max_coords_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes the scalar loss from the current parameter values.
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``;
    the max over all sampled coordinates is returned. Parameters should be
    float64 for meaningful tolerances.
    """
    if not (1e-6 <= h <= 1e-3):
        raise PreconditionError(f"step size h={h} outside [1e-6, 1e-3]")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise PreconditionError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                dn = f().item()
            flat[i] = orig
            numeric = (up - dn) / (2.0 * h)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


# -- binary dump format --------------------------------------------------------

_DUMP_MAGIC = b"TNSR"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dump_tensor(arr: np.ndarray | Tensor, fp) -> None:
    """Write one array to a binary stream (little-endian debug format).

    Layout: magic ``TNSR`` | rank u32 | extents u64 each | dtype code u32 |
    raw row-major values.
    """
    a = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
    code = _DTYPE_CODES[np.dtype(a.dtype).newbyteorder("<")]
    close = False
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        fp = open(fp, "wb")
        close = True
    try:
        fp.write(_DUMP_MAGIC)
        fp.write(struct.pack("<I", a.ndim))
        fp.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fp.write(struct.pack("<I", code))
        fp.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())
    finally:
        if close:
            fp.close()


def load_tensor(fp) -> np.ndarray:
    """Read one array written by :func:`dump_tensor`."""
    close = False
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        fp = open(fp, "rb")
        close = True
    try:
        magic = fp.read(4)
        if magic != _DUMP_MAGIC:
            raise ValueError(f"bad tensor dump magic {magic!r}")
        rank, = struct.unpack("<I", fp.read(4))
        shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
        code, = struct.unpack("<I", fp.read(4))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(fp.read(n * dt.itemsize), dtype=dt)
        return data.reshape(shape).copy()
    finally:
        if close:
            fp.close()
