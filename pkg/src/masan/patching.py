"""Non-overlapping grid partition of volumes into patches, and its inverse.

Patch ``k`` of a ``(gz, gy, gx)`` grid sits at cell ``(iz, iy, ix)`` with
``k = (iz * gy + iy) * gx + ix`` -- z-major, then y, then x.  Extents that
are not multiples of the grid are zero-padded at the high-index end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor


@dataclass(frozen=True)
class GridSpec:
    grid: tuple[int, int, int] = (4, 4, 4)
    pad_policy: str = "zero_pad_high_end"

    def __post_init__(self):
        if len(self.grid) != 3 or any(int(g) < 1 for g in self.grid):
            raise ValueError(f"grid components must be >= 1, got {self.grid}")
        if self.pad_policy != "zero_pad_high_end":
            raise ValueError(f"unsupported pad policy {self.pad_policy!r}")

    @property
    def n_patches(self) -> int:
        return int(np.prod(self.grid))

    def padded_extents(self, extents) -> tuple[int, int, int]:
        return tuple(-(-int(e) // g) * g for e, g in zip(extents, self.grid))

    def patch_extents(self, extents) -> tuple[int, int, int]:
        return tuple(p // g for p, g in zip(self.padded_extents(extents), self.grid))

    def cell(self, k: int) -> tuple[int, int, int]:
        gz, gy, gx = self.grid
        return k // (gy * gx), (k // gx) % gy, k % gx


@dataclass
class PatchSet:
    patches: list[Tensor]
    original_extents: tuple[int, int, int]
    padded_extents: tuple[int, int, int]
    grid: GridSpec = field(default_factory=GridSpec)

    def __len__(self):
        return len(self.patches)

    def stacked(self) -> np.ndarray:
        return np.stack([p.data for p in self.patches])


def split_grid(vol: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Array-level partition: ``[..., D, H, W] -> [P, ..., d, h, w]``."""
    extents = vol.shape[-3:]
    if any(e < g for e, g in zip(extents, spec.grid)):
        raise ShapeError(f"volume extents {extents} smaller than grid {spec.grid}")
    padded = spec.padded_extents(extents)
    if padded != tuple(extents):
        pad = [(0, 0)] * (vol.ndim - 3) + [(0, p - e) for p, e in zip(padded, extents)]
        vol = np.pad(vol, pad)
    gz, gy, gx = spec.grid
    d, h, w = (p // g for p, g in zip(padded, spec.grid))
    lead = vol.shape[:-3]
    nl = len(lead)
    v = vol.reshape(lead + (gz, d, gy, h, gx, w))
    order = (nl, nl + 2, nl + 4) + tuple(range(nl)) + (nl + 1, nl + 3, nl + 5)
    return np.ascontiguousarray(v.transpose(order)).reshape((gz * gy * gx,) + lead + (d, h, w))


def merge_grid(patches: np.ndarray, spec: GridSpec, extents=None) -> np.ndarray:
    """Inverse of :func:`split_grid`; crops to ``extents`` when given."""
    gz, gy, gx = spec.grid
    P = patches.shape[0]
    if P != gz * gy * gx:
        raise ShapeError(f"expected {gz * gy * gx} patches, got {P}")
    lead = patches.shape[1:-3]
    d, h, w = patches.shape[-3:]
    nl = len(lead)
    v = patches.reshape((gz, gy, gx) + lead + (d, h, w))
    order = tuple(range(3, 3 + nl)) + (0, 3 + nl, 1, 4 + nl, 2, 5 + nl)
    vol = np.ascontiguousarray(v.transpose(order)).reshape(lead + (gz * d, gy * h, gx * w))
    if extents is not None:
        D, H, W = extents
        vol = np.ascontiguousarray(vol[..., :D, :H, :W])
    return vol


def _volume_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def partition3d(volume, spec: GridSpec = GridSpec()) -> PatchSet:
    """Split ``volume[C, D, H, W]`` into ``prod(grid)`` equally shaped patches."""
    vol = _volume_array(volume)
    if vol.ndim != 4:
        raise ShapeError(f"partition3d expects [C, D, H, W], got {vol.shape}")
    stacked = split_grid(vol, spec)
    return PatchSet([Tensor(p) for p in stacked], tuple(vol.shape[-3:]),
                    spec.padded_extents(vol.shape[-3:]), spec)


def partition4d(series, spec: GridSpec = GridSpec()) -> PatchSet:
    """Split every frame of ``series[T, C, D, H, W]``; the time axis is never cut."""
    vol = _volume_array(series)
    if vol.ndim != 5:
        raise ShapeError(f"partition4d expects [T, C, D, H, W], got {vol.shape}")
    stacked = split_grid(vol, spec)
    return PatchSet([Tensor(p) for p in stacked], tuple(vol.shape[-3:]),
                    spec.padded_extents(vol.shape[-3:]), spec)


def reassemble3d(ps: PatchSet) -> Tensor:
    """Tile the patches back and crop the padding; works for 3-D and 4-D sets."""
    if len(ps.patches) != ps.grid.n_patches:
        raise ShapeError(f"PatchSet holds {len(ps.patches)} patches for grid {ps.grid.grid}")
    shape = ps.patches[0].shape
    for p in ps.patches:
        if p.shape != shape:
            raise ShapeError(f"inconsistent patch shapes {shape} and {p.shape}")
    expected = tuple(e * g for e, g in zip(shape[-3:], ps.grid.grid))
    if expected != tuple(ps.padded_extents):
        raise ShapeError(f"patch extents {shape[-3:]} x grid {ps.grid.grid} != padded {ps.padded_extents}")
    return Tensor(merge_grid(ps.stacked(), ps.grid, ps.original_extents))


reassemble4d = reassemble3d
