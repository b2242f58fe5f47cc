"""Patch-level encoder-decoder networks for structural and functional volumes.

Both modules run all patches at once: inputs are stacked as
``[P, N, C, d, h, w]`` (patch, sample, channel, extents).  With independent
weights every layer carries a leading ``P`` axis on its parameters; with
``share_weights`` the patch axis is folded into the batch instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Module, PatchConv, ResBlock
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    init_channels: int = 32
    channel_schedule: tuple[int, ...] = (32, 64, 128, 128)
    bottleneck_channels: int = 64
    num_downsamples: int = 3
    target_extent: int = 2
    share_weights: bool = False
    gn_eps: float = 1e-5

    def __post_init__(self):
        if self.num_downsamples < 1:
            raise ValueError("num_downsamples must be >= 1")
        if len(self.channel_schedule) != self.num_downsamples + 1:
            raise ValueError(
                f"channel_schedule needs {self.num_downsamples + 1} entries, got {self.channel_schedule}")
        if self.channel_schedule[0] != self.init_channels:
            raise ValueError("channel_schedule must start at init_channels")
        if min(self.channel_schedule) < 1 or self.bottleneck_channels < 1:
            raise ValueError("channel counts must be positive")

    @classmethod
    def for_patch(cls, patch_extent: int, target_extent: int = 2, **kw) -> "EncoderConfig":
        """Pick the depth that brings ``patch_extent`` down to ``target_extent``.

        The channel schedule is the default one truncated (or extended with its
        last value) to the required length unless given explicitly.
        """
        ratio = patch_extent // target_extent
        if ratio < 2 or ratio * target_extent != patch_extent or ratio & (ratio - 1):
            raise ValueError(f"cannot reach extent {target_extent} from {patch_extent} by halving")
        depth = int(np.log2(ratio))
        if "channel_schedule" not in kw:
            base = list(cls.channel_schedule)
            base = (base + [base[-1]] * depth)[:depth + 1]
            kw["channel_schedule"] = tuple(base)
        kw.setdefault("init_channels", kw["channel_schedule"][0])
        return cls(num_downsamples=depth, target_extent=target_extent, **kw)

    def bottleneck_extents(self, patch_extents) -> tuple[int, ...]:
        f = 2 ** self.num_downsamples
        for e in patch_extents:
            if e % f or e // f < 1:
                raise ShapeError(
                    f"patch extents {tuple(patch_extents)} not divisible by 2^{self.num_downsamples}")
        return tuple(e // f for e in patch_extents)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.001
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Embedding:
    h: Tensor
    skips: list[Tensor] = field(default_factory=list)


class PatchAutoencoder(Module):
    """Residual encoder-decoder applied independently to every patch.

    Encoder: InitConv, then per stage a stride-2 conv and a residual block;
    the last block emits ``bottleneck_channels``.  Decoder: per stage a 2x
    trilinear upsample, concatenation with the encoder feature of the same
    resolution, and a residual block; a final 1x1x1 conv restores the input
    channel count.
    """

    def __init__(self, name: str, in_channels: int, cfg: EncoderConfig, n_patches: int,
                 rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        self.in_channels = in_channels
        self.n_patches = n_patches
        g = 1 if cfg.share_weights else n_patches
        ch = cfg.channel_schedule
        nd = cfg.num_downsamples
        eps = cfg.gn_eps
        self.init = self.child(PatchConv(f"{name}.enc.init", g, in_channels, ch[0], 3, 1, 1, rng))
        self.down, self.enc_blocks = [], []
        for s in range(1, nd + 1):
            self.down.append(self.child(PatchConv(f"{name}.enc.down{s}", g, ch[s - 1], ch[s], 3, 2, 1, rng)))
            cout = cfg.bottleneck_channels if s == nd else ch[s]
            self.enc_blocks.append(self.child(ResBlock(f"{name}.enc.block{s}", g, ch[s], cout, rng, eps)))
        self.dec_blocks = []
        cin = cfg.bottleneck_channels
        for s in range(nd, 0, -1):
            self.dec_blocks.append(
                self.child(ResBlock(f"{name}.dec.block{s}", g, cin + ch[s - 1], ch[s - 1], rng, eps)))
            cin = ch[s - 1]
        self.final = self.child(PatchConv(f"{name}.dec.final", g, ch[0], in_channels, 1, 1, 0, rng))

    def _fold(self, x: Tensor) -> Tensor:
        if not self.cfg.share_weights:
            if x.shape[0] != self.n_patches:
                raise ShapeError(f"{self.name}: expected {self.n_patches} patches, got {x.shape[0]}")
            return x
        P, N = x.shape[:2]
        return T.reshape(x, (1, P * N) + x.shape[2:])

    def _unfold(self, x: Tensor, P: int) -> Tensor:
        if not self.cfg.share_weights:
            return x
        return T.reshape(x, (P, x.shape[1] // P) + x.shape[2:])

    def encode(self, x: Tensor) -> Embedding:
        """``x[P, N, C, d, h, w] -> Embedding`` (skips ordered shallow to deep)."""
        if x.ndim != 6 or x.shape[2] != self.in_channels:
            raise ShapeError(f"{self.name}: expected [P, N, {self.in_channels}, d, h, w], got {x.shape}")
        self.cfg.bottleneck_extents(x.shape[3:])
        P = x.shape[0]
        y = self.init(self._fold(x))
        skips = []
        for down, block in zip(self.down, self.enc_blocks):
            skips.append(y)
            y = block(down(y))
        return Embedding(self._unfold(y, P), [self._unfold(s, P) for s in skips])

    def decode(self, e: Embedding) -> Tensor:
        if len(e.skips) != self.cfg.num_downsamples:
            raise ShapeError(f"{self.name}: {len(e.skips)} skips for {self.cfg.num_downsamples} stages")
        P = e.h.shape[0]
        y = self._fold(e.h)
        for block, skip in zip(self.dec_blocks, reversed(e.skips)):
            y = T.upsample_trilinear2x(y)
            s = self._fold(skip)
            if y.shape[3:] != s.shape[3:]:
                raise ShapeError(f"{self.name}: skip extents {s.shape[3:]} do not match {y.shape[3:]}")
            y = block(T.concat([y, s], axis=2))
        return self._unfold(self.final(y), P)


class StructuralPatchModule(PatchAutoencoder):
    """sPM: patch autoencoder for single-channel structural volumes."""

    def __init__(self, cfg: EncoderConfig, n_patches: int, rng, channels: int = 1, name: str = "spm"):
        super().__init__(name, channels, cfg, n_patches, rng)


class FunctionalPatchModule(PatchAutoencoder):
    """fPM: the time axis is folded into the input channels.

    Inputs are ``[P, N, T, C, d, h, w]``; the network sees ``T*C`` channels
    and the reconstruction is reshaped back to the 7-D layout.
    """

    def __init__(self, cfg: EncoderConfig, n_patches: int, rng, frames: int, channels: int = 1,
                 name: str = "fpm"):
        super().__init__(name, frames * channels, cfg, n_patches, rng)
        self.frames = frames
        self.channels = channels

    def encode(self, x: Tensor) -> Embedding:
        if x.ndim != 7 or x.shape[2:4] != (self.frames, self.channels):
            raise ShapeError(
                f"{self.name}: expected [P, N, {self.frames}, {self.channels}, d, h, w], got {x.shape}")
        P, N = x.shape[:2]
        return super().encode(T.reshape(x, (P, N, self.frames * self.channels) + x.shape[4:]))

    def decode(self, e: Embedding) -> Tensor:
        y = super().decode(e)
        P, N = y.shape[:2]
        return T.reshape(y, (P, N, self.frames, self.channels) + y.shape[3:])


def sparsity_penalty(h: Tensor, lam: float) -> Tensor:
    """``lam * sum(|h|)``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return T.scale(T.reduce("sum", T.abs_(h)), lam)


def modality_recon_loss(generated: Tensor, original: Tensor, h: Tensor, cfg: LossConfig,
                        n_samples: int | None = None) -> Tensor:
    """Summed squared error per sample, averaged over the batch, plus the sparsity term.

    ``n_samples`` defaults to the leading extent; pass it explicitly for
    patch-stacked tensors where the batch axis is the second one.
    """
    if generated.shape != original.shape:
        raise ShapeError(f"reconstruction shape {generated.shape} != original {original.shape}")
    n = generated.shape[0] if n_samples is None else n_samples
    diff = T.sub(generated, original)
    sse = T.reduce("sum", T.mul(diff, diff))
    return T.add(T.scale(sse, 1.0 / n), sparsity_penalty(h, cfg.lam))
