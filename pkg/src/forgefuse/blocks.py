"""Network building blocks: parameter containers, attention, transformer
blocks, and batch normalization.

Modules register parameters and submodules explicitly so checkpoints can
address every array by a stable dotted name. All randomness comes from the
`numpy.random.Generator` passed at construction.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError
from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container with named children and buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value)
        self._buffers[name] = arr
        return arr

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, mod in self._children.items():
            out.update(mod.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, mod in self._children.items():
            out.update(mod.named_buffers(prefix + name + "."))
        return out

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            self._buffers[head][...] = value

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (gradient-check mode)."""
        for name, p in list(self._params.items()):
            p.data = p.data.astype(dtype)
            p.grad = None
        for name, b in list(self._buffers.items()):
            self._buffers[name] = b.astype(dtype)
        for mod in self._children.values():
            mod.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 dtype=np.float32, std: float = 0.02):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.w = self.param("w", rng.normal(0.0, std, (d_in, d_out)).astype(dtype))
        self.b = self.param("b", np.zeros(d_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        # Flatten leading axes so the product is a single large GEMM instead
        # of numpy's per-slice stacked matmul.
        lead = x.shape[:-1]
        if x.ndim > 2:
            x = T.reshape(x, (-1, self.d_in))
        y = T.matmul(x, self.w) + self.b
        if len(lead) > 1:
            y = T.reshape(y, lead + (self.d_out,))
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = self.param("g", np.ones(dim, dtype=dtype))
        self.b = self.param("b", np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b, self.eps)


class MultiHeadAttention(Module):
    """Self-attention over the last two axes (..., L, D), optionally masked.

    The additive mask must broadcast against the (..., heads, L, L) score
    tensor; entries are 0 or the BLOCKED sentinel and are scaled together
    with the scores by 1/sqrt(head dim).
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.wq = self.child("wq", Linear(rng, dim, dim, dtype))
        self.wk = self.child("wk", Linear(rng, dim, dim, dtype))
        self.wv = self.child("wv", Linear(rng, dim, dim, dtype))
        self.wo = self.child("wo", Linear(rng, dim, dim, dtype))

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        lead = x.shape[:-2]
        L, D = x.shape[-2], x.shape[-1]
        h, dh = self.heads, self.head_dim
        x2 = T.reshape(x, (-1, D))
        B = x2.shape[0] // L

        # One GEMM for q/k/v: weights are stored separately but concatenated
        # per call (the concat is graph-recorded, so grads split back).
        wqkv = T.concat([self.wq.w, self.wk.w, self.wv.w], axis=1)
        bqkv = T.concat([self.wq.b, self.wk.b, self.wv.b], axis=0)
        qkv = T.matmul(x2, wqkv) + bqkv
        qkv = T.transpose(T.reshape(qkv, (B, L, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]        # (B, h, L, dh)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
        if mask is None:
            attn = T.softmax(scores, scale=self.scale)
        else:
            attn = T.masked_softmax(scores, mask, scale=self.scale)
        out = T.matmul(attn, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B * L, D))
        out = self.wo.forward(out)
        return T.reshape(out, lead + (L, D))


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int,
                 dtype=np.float32):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, dim, hidden, dtype))
        self.fc2 = self.child("fc2", Linear(rng, hidden, dim, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2.forward(T.gelu(self.fc1.forward(x)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x), mask), then x + ff(norm(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int,
                 mlp_ratio: float = 2.0, dtype=np.float32):
        super().__init__()
        self.ln1 = self.child("ln1", LayerNorm(dim, dtype))
        self.attn = self.child("attn", MultiHeadAttention(rng, dim, heads, dtype))
        self.ln2 = self.child("ln2", LayerNorm(dim, dtype))
        self.ff = self.child("ff", FeedForward(rng, dim, int(dim * mlp_ratio), dtype))

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn.forward(self.ln1.forward(x), mask)
        return x + self.ff.forward(self.ln2.forward(x))


class TransformerStack(Module):
    def __init__(self, rng: np.random.Generator, depth: int, dim: int,
                 heads: int, mlp_ratio: float = 2.0, dtype=np.float32):
        super().__init__()
        self.blocks = [
            self.child(f"block{i}", TransformerBlock(rng, dim, heads, mlp_ratio, dtype))
            for i in range(depth)
        ]

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        for blk in self.blocks:
            x = blk.forward(x, mask)
        return x


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 kernel: int = 3, stride: int = 2, pad: int = 1,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = pad
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = self.param(
            "w", rng.normal(0.0, std, (c_out, c_in, kernel, kernel)).astype(dtype))
        self.b = self.param("b", np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 kernel: int, stride: int, pad: int = 0, out_pad: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.pad = pad
        self.out_pad = out_pad
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = self.param(
            "w", rng.normal(0.0, std, (c_in, c_out, kernel, kernel)).astype(dtype))
        self.b = self.param("b", np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d_transpose(x, self.w, self.b, stride=self.stride,
                                  pad=self.pad, out_pad=self.out_pad)


class BatchNorm2d(Module):
    """Batch normalization over (B, C, H, W) with running statistics.

    Training mode normalizes with batch statistics and updates the running
    buffers (momentum 0.1, unbiased running variance); eval mode normalizes
    with the stored statistics. Both buffers travel in checkpoints.
    """

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.g = self.param("g", np.ones(channels, dtype=dtype))
        self.b = self.param("b", np.zeros(channels, dtype=dtype))
        self.running_mean = self.buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = self.buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor, training: bool) -> Tensor:
        c = x.shape[1]
        if training:
            mu = T.tensor_mean(x, axis=(0, 2, 3), keepdims=True)
            xc = x - mu
            var = T.tensor_mean(xc * xc, axis=(0, 2, 3), keepdims=True)
            n = x.size // c
            rm = self._buffers["running_mean"]
            rv = self._buffers["running_var"]
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            rm *= 1.0 - self.momentum
            rm += self.momentum * mu.data.reshape(-1)
            rv *= 1.0 - self.momentum
            rv += self.momentum * unbiased
            xhat = xc / T.sqrt(var + self.eps)
        else:
            rm = self._buffers["running_mean"].reshape(1, c, 1, 1)
            rv = self._buffers["running_var"].reshape(1, c, 1, 1)
            xhat = (x - rm) / np.sqrt(rv + self.eps)
        g = T.reshape(self.g, (1, c, 1, 1))
        b = T.reshape(self.b, (1, c, 1, 1))
        return xhat * g + b
