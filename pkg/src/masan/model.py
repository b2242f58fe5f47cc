"""The full network: patch autoencoders, region attention, fusion, MLP head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .autoencoders import (EncoderConfig, FunctionalPatchModule, LossConfig, StructuralPatchModule,
                           modality_recon_loss)
from .classifier import MLP, LossBreakdown, MlpConfig, Prediction, cross_entropy, mlp_forward, total_loss
from .fusion import (FeatureMap, GateParams, QkvParams, addition_fuse, assemble_regions,
                     channel_attention, project_qkv, region_self_attention, spatial_attention,
                     split_regions, t1_guided_fuse)
from .nn import Module
from .patching import GridSpec, merge_grid, split_grid
from .tensor import ShapeError, Tensor

FUSION_MODES = ("attention", "addition")
PIPELINE_ORDERS = ("attend_then_fuse", "fuse_then_attend", "fuse_only")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "attention"
    pipeline_order: str = "attend_then_fuse"
    reduction: int = 4
    scaled_attention: bool = False

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}, got {self.mode!r}")
        if self.pipeline_order not in PIPELINE_ORDERS:
            raise ValueError(f"pipeline order must be one of {PIPELINE_ORDERS}, got {self.pipeline_order!r}")


@dataclass
class ForwardResult:
    t1_patches: Tensor
    fmri_patches: Tensor
    h_t1: Tensor
    h_fmri: Tensor
    f_t1: FeatureMap
    f_fmri: FeatureMap
    fused: FeatureMap
    prediction: Prediction
    recon_t1: Tensor | None = None
    recon_fmri: Tensor | None = None
    attention: dict[str, Tensor] = field(default_factory=dict)


class MASAN(Module):
    def __init__(self, extents: tuple[int, int, int], frames: int, grid: GridSpec = GridSpec(),
                 encoder: EncoderConfig | None = None, mlp: MlpConfig = MlpConfig(),
                 fusion: FusionConfig = FusionConfig(), seed: int = 0):
        super().__init__("masan")
        self.extents = tuple(extents)
        self.frames = frames
        self.grid = grid
        patch = grid.patch_extents(extents)
        if encoder is None:
            encoder = EncoderConfig.for_patch(patch[0])
        self.encoder_cfg = encoder
        self.fusion_cfg = fusion
        self.bottleneck = encoder.bottleneck_extents(patch)
        rng = np.random.default_rng(seed)
        P = grid.n_patches
        cb = encoder.bottleneck_channels
        self.spm = self.child(StructuralPatchModule(encoder, P, rng))
        self.fpm = self.child(FunctionalPatchModule(encoder, P, rng, frames=frames))
        self.qkv_t1 = self.child(QkvParams("fusion.qkv_t1", cb, rng))
        self.qkv_fmri = self.child(QkvParams("fusion.qkv_fmri", cb, rng))
        self.qkv_fused = self.child(QkvParams("fusion.qkv_fused", cb, rng))
        self.gates = self.child(GateParams("fusion.gates", cb, rng, fusion.reduction))
        width = cb * int(np.prod(self.bottleneck)) * P
        self.mlp = self.child(MLP("classifier", width, mlp, rng))

    def autoencoder_parameters(self):
        return self.spm.parameters() + self.fpm.parameters()

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))[:5]
            raise ShapeError(f"state does not match model parameters (e.g. {missing})")
        for name, arr in state.items():
            if params[name].shape != arr.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {params[name].shape}")
            params[name].data[...] = arr

    def _attend(self, regions: Tensor, qkv: QkvParams, key: str, attn: dict) -> Tensor:
        q, k, v = project_qkv(regions, qkv)
        new, w = region_self_attention(q, k, v, self.fusion_cfg.scaled_attention)
        attn[key] = w
        return T.reshape(new, regions.shape)

    def patches(self, t1: np.ndarray, fmri: np.ndarray) -> tuple[Tensor, Tensor]:
        if t1.ndim != 5 or tuple(t1.shape[-3:]) != self.extents:
            raise ShapeError(f"T1 batch must be [N, 1, {self.extents}], got {t1.shape}")
        if fmri.ndim != 6 or fmri.shape[1] != self.frames or tuple(fmri.shape[-3:]) != self.extents:
            raise ShapeError(f"fMRI batch must be [N, {self.frames}, 1, {self.extents}], got {fmri.shape}")
        return Tensor(split_grid(t1, self.grid)), Tensor(split_grid(fmri, self.grid))

    def forward(self, t1: np.ndarray, fmri: np.ndarray, reconstruct: bool = True) -> ForwardResult:
        """``t1[N, 1, D, H, W]``, ``fmri[N, T, 1, D, H, W]`` -> :class:`ForwardResult`."""
        xs, xf = self.patches(t1, fmri)
        es = self.spm.encode(xs)
        ef = self.fpm.encode(xf)
        order = self.fusion_cfg.pipeline_order
        attn: dict[str, Tensor] = {}
        rs = T.transpose(es.h, (1, 0, 2, 3, 4, 5))
        rf = T.transpose(ef.h, (1, 0, 2, 3, 4, 5))
        if order == "attend_then_fuse":
            rs = self._attend(rs, self.qkv_t1, "T1", attn)
            rf = self._attend(rf, self.qkv_fmri, "fMRI", attn)
        g = self.grid.grid
        f_t1 = assemble_regions(rs, g)
        f_fmri = assemble_regions(rf, g)
        if self.fusion_cfg.mode == "attention":
            f_t1s = spatial_attention(channel_attention(f_t1, self.gates), self.gates)
            fused = t1_guided_fuse(f_fmri, f_t1s)
        else:
            fused = addition_fuse(f_fmri, f_t1)
        head_in = fused
        if order == "fuse_then_attend":
            regions = self._attend(split_regions(fused, g), self.qkv_fused, "fused", attn)
            head_in = assemble_regions(regions, g)
        pred = mlp_forward(head_in, self.mlp)
        out = ForwardResult(xs, xf, es.h, ef.h, FeatureMap(f_t1, "T1"), FeatureMap(f_fmri, "fMRI"),
                            FeatureMap(fused, "fused"), pred, attention=attn)
        if reconstruct:
            out.recon_t1 = self.spm.decode(es)
            out.recon_fmri = self.fpm.decode(ef)
        return out

    def reconstruction_losses(self, out: ForwardResult, cfg: LossConfig) -> tuple[Tensor, Tensor]:
        n = out.t1_patches.shape[1]
        L_s = modality_recon_loss(out.recon_t1, out.t1_patches, out.h_t1, cfg, n)
        L_f = modality_recon_loss(out.recon_fmri, out.fmri_patches, out.h_fmri, cfg, n)
        return L_s, L_f

    def losses(self, out: ForwardResult, labels, cfg: LossConfig) -> LossBreakdown:
        L_s, L_f = self.reconstruction_losses(out, cfg)
        return total_loss(L_s, L_f, cross_entropy(out.prediction, labels), cfg)

    def region_scores(self, fused: Tensor) -> np.ndarray:
        """Mean absolute fused feature per region: ``[N, R]``."""
        regions = split_regions(fused, self.grid.grid).data
        return np.abs(regions).mean(axis=(2, 3, 4, 5))

    def embedding_map(self, fused: Tensor) -> np.ndarray:
        """Paint region scores into their grid cells: ``[N, D, H, W]``."""
        scores = self.region_scores(fused)
        patch = self.grid.patch_extents(self.extents)
        cells = np.broadcast_to(scores.T[:, :, None, None, None], scores.T.shape + patch)
        return merge_grid(np.ascontiguousarray(cells), self.grid, self.extents)
