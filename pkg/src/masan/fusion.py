"""Region self-attention and T1-guided channel/spatial attention fusion.

Region features come in as ``[N, R, C, d, h, w]`` (sample, region, ...),
with ``R`` in patch order.  Feature maps are the regions tiled back onto the
bottleneck grid: ``[N, C, gz*d, gy*h, gx*w]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, uniform_fan_in
from .tensor import DTYPE, ShapeError, Tensor

MODALITIES = ("T1", "fMRI", "fused")


@dataclass
class FeatureMap:
    features: Tensor
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality tag {self.modality!r}")


class QkvParams(Module):
    """Query/key/value projections as 1x1x1 convolutions shared by all regions."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator, proj_channels: int | None = None):
        super().__init__(name)
        co = proj_channels or channels
        self.wq = self.param("wq", uniform_fan_in(rng, (co, channels, 1, 1, 1), channels))
        self.wk = self.param("wk", uniform_fan_in(rng, (co, channels, 1, 1, 1), channels))
        self.wv = self.param("wv", uniform_fan_in(rng, (co, channels, 1, 1, 1), channels))


def project_qkv(regions: Tensor, p: QkvParams) -> tuple[Tensor, Tensor, Tensor]:
    """Project every region; returns ``(q, k, v)`` each ``[N, R, dk]``.

    A 5-D ``[R, C, d, h, w]`` input is treated as one sample and yields
    ``[R, dk]`` outputs.
    """
    single = regions.ndim == 5
    if single:
        regions = T.reshape(regions, (1,) + regions.shape)
    if regions.ndim != 6 or regions.shape[2] != p.wq.shape[1]:
        raise ShapeError(f"regions {regions.shape} incompatible with projection {p.wq.shape}")
    N, R = regions.shape[:2]
    flat = T.reshape(regions, (N * R,) + regions.shape[2:])
    outs = []
    for w in (p.wq, p.wk, p.wv):
        y = T.conv3d(flat, w)
        shape = (R, -1) if single else (N, R, -1)
        outs.append(T.reshape(y, shape))
    return tuple(outs)


def region_self_attention(q: Tensor, k: Tensor, v: Tensor, scaled: bool = False) -> tuple[Tensor, Tensor]:
    """``weights = softmax_j(<q_i, k_j>)``, ``new_i = sum_j weights_ij v_j``.

    Works on ``[R, dk]`` or batched ``[N, R, dk]``; returns ``(new, weights)``.
    """
    if q.shape[:-1] != k.shape[:-1] or k.shape[:-1] != v.shape[:-1] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    perm = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    logits = T.matmul(q, T.transpose(k, perm))
    if scaled:
        logits = T.scale(logits, 1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(logits, axis=-1)
    return T.matmul(weights, v), weights


def assemble_regions(regions: Tensor, grid: tuple[int, int, int]) -> Tensor:
    """``[N, R, C, d, h, w] -> [N, C, gz*d, gy*h, gx*w]`` (patch order z, y, x)."""
    N, R, C, d, h, w = regions.shape
    gz, gy, gx = grid
    if R != gz * gy * gx:
        raise ShapeError(f"{R} regions do not fill grid {grid}")
    x = T.reshape(regions, (N, gz, gy, gx, C, d, h, w))
    x = T.transpose(x, (0, 4, 1, 5, 2, 6, 3, 7))
    return T.reshape(x, (N, C, gz * d, gy * h, gx * w))


def split_regions(fmap: Tensor, grid: tuple[int, int, int]) -> Tensor:
    """Inverse of :func:`assemble_regions`."""
    N, C, D, H, W = fmap.shape
    gz, gy, gx = grid
    d, h, w = D // gz, H // gy, W // gx
    x = T.reshape(fmap, (N, C, gz, d, gy, h, gx, w))
    x = T.transpose(x, (0, 2, 4, 6, 1, 3, 5, 7))
    return T.reshape(x, (N, gz * gy * gx, C, d, h, w))


class GateParams(Module):
    """Channel-gate bottleneck MLP (ratio ``reduction``) and 3x3x3 spatial-gate conv."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__(name)
        if reduction < 1 or channels % reduction:
            raise ValueError(f"reduction ratio {reduction} must be >= 1 and divide {channels}")
        self.reduction = reduction
        hidden = channels // reduction
        self.fc1 = self.child(Linear(f"{name}.channel.fc1", channels, hidden, rng))
        self.fc2 = self.child(Linear(f"{name}.channel.fc2", hidden, channels, rng))
        self.spatial_w = self.param("spatial.w", uniform_fan_in(rng, (1, 1, 3, 3, 3), 27))
        self.spatial_b = self.param("spatial.b", np.zeros((1,), dtype=DTYPE))


def _scale_by(f: Tensor, gate: Tensor) -> Tensor:
    return T.mul(f, T.expand(gate, f.shape))


def channel_gate(f: Tensor, g: GateParams) -> Tensor:
    """Per-channel gate in (0, 1): sigmoid(MLP(global max pool)); ``[N, C]``."""
    N, C = f.shape[:2]
    if C != g.fc1.w.shape[0]:
        raise ShapeError(f"feature map has {C} channels, gate expects {g.fc1.w.shape[0]}")
    pooled = T.reduce("max", f, axes=(2, 3, 4))
    return T.sigmoid(g.fc2(T.relu(g.fc1(pooled))))


def channel_attention(f: Tensor, g: GateParams) -> Tensor:
    gate = channel_gate(f, g)
    return _scale_by(f, T.reshape(gate, gate.shape + (1, 1, 1)))


def spatial_gate(f: Tensor, g: GateParams) -> Tensor:
    """Per-voxel gate in (0, 1) from the channel-wise max; ``[N, 1, D, H, W]``."""
    collapsed = T.reduce("max", f, axes=1, keepdims=True)
    return T.sigmoid(T.conv3d(collapsed, g.spatial_w, g.spatial_b, 1, 1))


def spatial_attention(f: Tensor, g: GateParams) -> Tensor:
    return _scale_by(f, spatial_gate(f, g))


def t1_guided_fuse(f_fmri: Tensor, f_t1s: Tensor) -> Tensor:
    """``f_fmri * f_t1s + f_fmri``."""
    if f_fmri.shape != f_t1s.shape:
        raise ShapeError(f"fusion inputs differ: {f_fmri.shape} vs {f_t1s.shape}")
    return T.add(T.mul(f_fmri, f_t1s), f_fmri)


def addition_fuse(f_fmri: Tensor, f_t1: Tensor) -> Tensor:
    if f_fmri.shape != f_t1.shape:
        raise ShapeError(f"fusion inputs differ: {f_fmri.shape} vs {f_t1.shape}")
    return T.add(f_fmri, f_t1)
