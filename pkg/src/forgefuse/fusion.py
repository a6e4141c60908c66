"""Multi-stream token fusion.

Per-stream patch tokens are stacked on a stream axis, optionally thinned by
stream drop during training, fused per patch by attention against a learned
fusion token, and finally refined by full attention across all patches.

Tensors carry the stream axis third from the end: ``(..., S, L, D)`` where
S is the number of streams, L the patch count and D the latent width.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, PreconditionError
from . import tensor as T
from .tensor import Tensor
from .blocks import Module, TransformerStack


def stack_streams(streams: list[Tensor], names: list[str] | None = None) -> Tensor:
    """Stack per-stream token tensors (..., L, D) into (..., S, L, D).

    Order is preserved; a shape mismatch names the offending stream.
    """
    if not streams:
        raise PreconditionError("stack_streams needs at least one stream")
    ref = streams[0].shape
    for i, s in enumerate(streams):
        if s.shape != ref:
            label = names[i] if names else f"#{i}"
            raise DimensionError(
                f"stream {label} has shape {s.shape}, expected {ref}")
    return T.stack(streams, axis=-3)


def stream_drop(stack: Tensor, p_drop: float, training: bool,
                rng: np.random.Generator | None = None,
                literal_scale: bool = False) -> Tensor:
    """Randomly zero whole streams during training.

    Each stream is dropped independently with probability ``p_drop``;
    survivors are rescaled by 1/(1 - p_drop) so every token keeps its
    expectation. If a draw kills every stream, one uniformly chosen stream
    is resurrected. ``literal_scale`` switches to the 1/p_drop rescale of
    the printed formula (not expectation preserving; off by default).

    Eval mode and p_drop = 0 are the identity.
    """
    if not 0.0 <= p_drop < 1.0:
        raise PreconditionError(f"p_drop must be in [0, 1), got {p_drop}")
    if not training or p_drop == 0.0:
        return stack
    if rng is None:
        raise PreconditionError("stream_drop in training mode needs an rng")
    lead = stack.shape[:-2]          # (..., S)
    keep = rng.random(lead) >= p_drop
    revive = rng.integers(0, lead[-1], size=lead[:-1])
    dead = ~keep.any(axis=-1)
    if dead.any():
        keep_flat = keep.reshape(-1, lead[-1])
        revive_flat = revive.reshape(-1)
        rows = np.flatnonzero(dead.reshape(-1))
        keep_flat[rows, revive_flat[rows]] = True
        keep = keep_flat.reshape(lead)
    scale = (1.0 / p_drop) if literal_scale else (1.0 / (1.0 - p_drop))
    factor = (keep * scale).astype(stack.dtype).reshape(lead + (1, 1))
    return stack * Tensor(factor)


class FusionToken(Module):
    """A single learnable D-vector, repeated per patch at forward time."""

    def __init__(self, rng: np.random.Generator, dim: int, dtype=np.float32):
        super().__init__()
        self.vec = self.param("vec", rng.normal(0.0, 0.02, dim).astype(dtype))


class TokenFusionTransformer(Module):
    """Fuse the S stream tokens of each patch into one token.

    For every patch the sequence [fusion token; stream tokens] of length
    S + 1 runs through the blocks, attending along the stream axis only
    (patches are independent here). Only the refined fusion slot is kept.
    """

    def __init__(self, rng: np.random.Generator, depth: int, dim: int,
                 heads: int, mlp_ratio: float = 2.0, dtype=np.float32):
        super().__init__()
        self.stack = self.child(
            "stack", TransformerStack(rng, depth, dim, heads, mlp_ratio, dtype))

    def forward(self, streams: Tensor, fusion_token: FusionToken) -> Tensor:
        nd = streams.ndim
        if nd < 3:
            raise DimensionError(f"expected (..., S, L, D), got {streams.shape}")
        d = streams.shape[-1]
        perm = list(range(nd))
        perm[-3], perm[-2] = perm[-2], perm[-3]
        per_patch = T.transpose(streams, perm)          # (..., L, S, D)
        lead = per_patch.shape[:-2]
        ft = T.broadcast_to(
            T.reshape(fusion_token.vec, (1,) * (nd - 1) + (d,)), lead + (1, d))
        seq = T.concat([ft, per_patch], axis=-2)        # (..., L, S+1, D)
        refined = self.stack.forward(seq)
        idx = (slice(None),) * (nd - 2) + (0,)
        return refined[idx]                             # (..., L, D)


class LongRangeTransformer(Module):
    """Full attention across all L fused tokens (image-level context)."""

    def __init__(self, rng: np.random.Generator, depth: int, dim: int,
                 heads: int, mlp_ratio: float = 2.0, dtype=np.float32):
        super().__init__()
        self.stack = self.child(
            "stack", TransformerStack(rng, depth, dim, heads, mlp_ratio, dtype))

    def forward(self, fused: Tensor) -> Tensor:
        return self.stack.forward(fused)
