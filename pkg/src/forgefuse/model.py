"""Full network assembly.

One stream per forensic signal (patch-embedding CNN followed by an
object-guided transformer), a trainable RGB stream, per-patch token fusion,
image-level context refinement and two output heads: a per-pixel
localization mask and a scalar detection score.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, DimensionError
from . import tensor as T
from .tensor import Tensor
from .blocks import (Module, Linear, Conv2d, ConvTranspose2d, BatchNorm2d,
                     TransformerStack)
from .fusion import (FusionToken, TokenFusionTransformer, LongRangeTransformer,
                     stack_streams, stream_drop)

_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_-]*$")
PRED_CLAMP = 1e-7


@dataclass
class ModelConfig:
    """Geometry, widths, depths and behavior flags of the network."""

    height: int = 64
    width: int = 64
    patch: int = 8
    signal_names: tuple[str, ...] = ("a", "b", "c")
    signal_channels: tuple[int, ...] = ()
    dim: int = 64
    heads: int = 4
    stream_depth: int = 2
    fusion_depth: int = 2
    context_depth: int = 2
    det_depth: int = 4
    mlp_ratio: float = 2.0
    p_drop: float = 0.2
    pos_embed: bool = True
    stream_embed: bool = True
    ogt_on_rgb: bool = False
    literal_drop_scale: bool = False

    def __post_init__(self):
        self.signal_names = tuple(self.signal_names)
        if not self.signal_channels:
            self.signal_channels = tuple(1 for _ in self.signal_names)
        else:
            self.signal_channels = tuple(self.signal_channels)
        if len(self.signal_channels) != len(self.signal_names):
            raise ConfigError("signal_channels must match signal_names")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"patch {self.patch} does not divide {(self.height, self.width)}")
        if self.patch < 2 or self.patch & (self.patch - 1):
            raise ConfigError(f"patch size must be a power of two >= 2, got {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        seen = set()
        for name in self.signal_names:
            if not _NAME_RE.match(name):
                raise ConfigError(f"invalid stream name {name!r}")
            if name == "rgb" or name in seen:
                raise ConfigError(f"stream name collision: {name!r}")
            seen.add(name)
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must be in [0, 1), got {self.p_drop}")

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_signals(self) -> int:
        return len(self.signal_names)

    @property
    def stream_names(self) -> tuple[str, ...]:
        return self.signal_names + ("rgb",)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small preset: 64x64 inputs, patch 8, width 64, depth 2."""
        base = dict(height=64, width=64, patch=8, dim=64, heads=4,
                    stream_depth=2, fusion_depth=2, context_depth=2, det_depth=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def fidelity(cls, **overrides) -> "ModelConfig":
        """Large preset: 224x224 inputs, patch 16, width 384, depth 6."""
        base = dict(height=224, width=224, patch=16, dim=384, heads=6,
                    stream_depth=6, fusion_depth=6, context_depth=6, det_depth=4,
                    mlp_ratio=4.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["signal_names"] = list(self.signal_names)
        d["signal_channels"] = list(self.signal_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class PatchEmbedder(Module):
    """Four-layer strided CNN mapping (B, C, H, W) to (B, L, D) patch tokens.

    log2(patch) stride-2 layers come first, stride-1 layers fill up to four
    total; GELU between layers. The output grid is exactly H/p x W/p.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, dim: int,
                 patch: int, dtype=np.float32):
        super().__init__()
        n_down = int(math.log2(patch))
        if 2 ** n_down != patch or n_down > 4:
            raise ConfigError(f"patch {patch} must be a power of two <= 16")
        strides = [2] * n_down + [1] * (4 - n_down)
        widths = [max(dim >> 3, 4), max(dim >> 2, 4), max(dim >> 1, 4), dim]
        chans = [c_in] + widths
        self.layers = [
            self.child(f"conv{i}", Conv2d(rng, chans[i], chans[i + 1],
                                          kernel=3, stride=s, pad=1, dtype=dtype))
            for i, s in enumerate(strides)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        b, d = x.shape[0], x.shape[1]
        tokens = T.transpose(x, (0, 2, 3, 1))
        return T.reshape(tokens, (b, -1, d))


class SignalStream(Module):
    """One forensic-signal stream: embedder, positions, masked transformer."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig, c_in: int,
                 masked: bool = True, dtype=np.float32):
        super().__init__()
        self.masked = masked
        self.embed = self.child("embed", PatchEmbedder(rng, c_in, cfg.dim,
                                                       cfg.patch, dtype))
        if cfg.pos_embed:
            self.pos = self.param("pos", rng.normal(
                0.0, 0.02, (cfg.n_patches, cfg.dim)).astype(dtype))
        else:
            self.pos = None
        if cfg.stream_embed:
            self.ident = self.param("ident", rng.normal(
                0.0, 0.02, cfg.dim).astype(dtype))
        else:
            self.ident = None
        self.blocks = self.child("blocks", TransformerStack(
            rng, cfg.stream_depth, cfg.dim, cfg.heads, cfg.mlp_ratio, dtype))

    def tokens_in(self, x: Tensor) -> Tensor:
        t = self.embed.forward(x)
        if self.pos is not None:
            t = t + self.pos
        return t

    def forward(self, x: Tensor, mask_bias: np.ndarray | None) -> Tensor:
        t = self.tokens_in(x)
        return self.blocks.forward(t, mask_bias if self.masked else None)


class LocalizationHead(Module):
    """Five transposed-conv layers from the token grid back to pixels.

    log2(patch) stride-2 upsampling layers then stride-1 refinement layers;
    every layer but the last is followed by ReLU and batch norm, the last
    by a sigmoid. Output values are clamped away from exact 0/1.
    """

    # stride plans keep the stride-1 refinement layers at low resolution
    _STRIDE_PLANS = {1: [2, 1, 1, 1, 1], 2: [2, 1, 2, 1, 1], 3: [2, 1, 2, 1, 2],
                     4: [2, 2, 1, 2, 2], 5: [2, 2, 2, 2, 2]}

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig,
                 dtype=np.float32):
        super().__init__()
        self.grid = (cfg.grid_h, cfg.grid_w)
        n_up = int(math.log2(cfg.patch))
        if n_up > 5:
            raise ConfigError(f"patch {cfg.patch} needs more than five layers")
        strides = self._STRIDE_PLANS[n_up]
        dim = cfg.dim
        chans = [dim]
        for i in range(4):
            chans.append(max(dim >> (i + 1), 4))
        chans.append(1)
        self.layers = []
        self.norms = []
        for i, s in enumerate(strides):
            kernel, pad = (2, 0) if s == 2 else (3, 1)
            self.layers.append(self.child(f"up{i}", ConvTranspose2d(
                rng, chans[i], chans[i + 1], kernel=kernel, stride=s, pad=pad,
                dtype=dtype)))
            if i < 4:
                self.norms.append(self.child(f"bn{i}", BatchNorm2d(
                    chans[i + 1], dtype=dtype)))

    def forward(self, tokens: Tensor, training: bool) -> Tensor:
        b, _, d = tokens.shape
        x = T.reshape(tokens, (b, self.grid[0], self.grid[1], d))
        x = T.transpose(x, (0, 3, 1, 2))
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i < len(self.layers) - 1:
                x = self.norms[i].forward(T.relu(x), training)
        x = T.clip(T.sigmoid(x), PRED_CLAMP, 1.0 - PRED_CLAMP)
        return T.reshape(x, (b, x.shape[2], x.shape[3]))


class DetectionHead(Module):
    """Classification token refined by transformer blocks, then one affine."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig,
                 dtype=np.float32):
        super().__init__()
        self.cls = self.param("cls", rng.normal(0.0, 0.02, cfg.dim).astype(dtype))
        self.blocks = self.child("blocks", TransformerStack(
            rng, cfg.det_depth, cfg.dim, cfg.heads, cfg.mlp_ratio, dtype))
        self.out = self.child("out", Linear(rng, cfg.dim, 1, dtype))

    def forward(self, tokens: Tensor) -> Tensor:
        b, _, d = tokens.shape
        cls = T.broadcast_to(T.reshape(self.cls, (1, 1, d)), (b, 1, d))
        seq = T.concat([cls, tokens], axis=1)
        refined = self.blocks.forward(seq)
        score = self.out.forward(refined[:, 0])
        score = T.clip(T.sigmoid(score), PRED_CLAMP, 1.0 - PRED_CLAMP)
        return T.reshape(score, (b,))


class _Container(Module):
    pass


class FusionModel(Module):
    """The full fusion network over N signals plus the RGB image."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.np_dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.streams = self.child("streams", _Container())
        for name, c in zip(cfg.signal_names, cfg.signal_channels):
            self.streams.child(name, SignalStream(rng, cfg, c, masked=True,
                                                  dtype=dtype))
        self.rgb = self.child("rgb", SignalStream(rng, cfg, 3,
                                                  masked=cfg.ogt_on_rgb,
                                                  dtype=dtype))
        self.fusion_token = self.child("fusion_token", FusionToken(rng, cfg.dim, dtype))
        self.tft = self.child("tft", TokenFusionTransformer(
            rng, cfg.fusion_depth, cfg.dim, cfg.heads, cfg.mlp_ratio, dtype))
        self.ldt = self.child("ldt", LongRangeTransformer(
            rng, cfg.context_depth, cfg.dim, cfg.heads, cfg.mlp_ratio, dtype))
        self.loc_head = self.child("loc_head", LocalizationHead(rng, cfg, dtype))
        self.det_head = self.child("det_head", DetectionHead(rng, cfg, dtype))

    # -- input validation --------------------------------------------------

    def _check_plane(self, name: str, arr: np.ndarray, channels: int) -> np.ndarray:
        cfg = self.cfg
        arr = np.asarray(arr)
        want = (channels, cfg.height, cfg.width)
        if arr.ndim != 4 or arr.shape[1:] != want:
            raise DimensionError(
                f"input {name!r} has shape {arr.shape}, expected (B,) + {want}")
        return arr.astype(self.np_dtype, copy=False)

    def forward(self, image: np.ndarray, signals: dict[str, np.ndarray],
                mask: np.ndarray, training: bool = False,
                drop_rng: np.random.Generator | None = None,
                bn_training: bool | None = None) -> tuple[Tensor, Tensor]:
        """Run the network on a batch.

        ``image`` is (B, 3, H, W); ``signals`` maps each configured signal
        name to (B, C_i, H, W); ``mask`` is the per-sample additive
        attention mask (B, L, L) or a shared (L, L), built once per sample
        and reused by every stream. ``bn_training`` overrides the batch-norm
        mode (frozen-network training keeps running statistics fixed).
        """
        if bn_training is None:
            bn_training = training
        cfg = self.cfg
        image = self._check_plane("rgb", image, 3)
        batch = image.shape[0]
        mask = np.asarray(mask, dtype=self.np_dtype)
        if mask.shape == (cfg.n_patches, cfg.n_patches):
            bias = mask.reshape(1, 1, cfg.n_patches, cfg.n_patches)
        elif mask.shape == (batch, cfg.n_patches, cfg.n_patches):
            bias = mask.reshape(batch, 1, cfg.n_patches, cfg.n_patches)
        else:
            raise DimensionError(
                f"attention mask has shape {mask.shape}, expected "
                f"(L, L) or (B, L, L) with L={cfg.n_patches}")

        outs = []
        for name, c in zip(cfg.signal_names, cfg.signal_channels):
            if name not in signals:
                raise KeyError(f"missing signal {name!r} in input batch")
            arr = self._check_plane(name, signals[name], c)
            stream: SignalStream = self.streams._children[name]
            t = stream.forward(Tensor(arr), bias)
            if stream.ident is not None:
                t = t + stream.ident
            outs.append(t)
        t = self.rgb.forward(Tensor(image), bias)
        if self.rgb.ident is not None:
            t = t + self.rgb.ident
        outs.append(t)

        stacked = stack_streams(outs, list(cfg.stream_names))
        stacked = stream_drop(stacked, cfg.p_drop, training, drop_rng,
                              cfg.literal_drop_scale)
        fused = self.tft.forward(stacked, self.fusion_token)
        tokens = self.ldt.forward(fused)
        loc = self.loc_head.forward(tokens, bn_training)
        det = self.det_head.forward(tokens)
        return loc, det
