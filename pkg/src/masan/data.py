"""Synthetic cohorts, the MVL1 volume format, splitting and exports."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .patching import GridSpec, merge_grid
from .tensor import DTYPE, Tensor

MAGIC = b"MVL1"
MAX_NDIM = 16
MAX_PAYLOAD = 1 << 40


class VolumeFormatError(ValueError):
    pass


class BadMagicError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class ExtentOverflowError(VolumeFormatError):
    pass


@dataclass
class SubjectSample:
    t1: np.ndarray      # [1, D, H, W]
    fmri: np.ndarray    # [T, 1, D, H, W]
    label: int
    subject_id: str


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    n_per_class: int = 60
    extents: tuple[int, int, int] = (16, 16, 16)
    frames: int = 4
    grid: tuple[int, int, int] = (4, 4, 4)
    signal_patches: tuple[int, ...] = (37, 38)
    signal_strength: float = 2.0
    noise_sigma: float = 0.5

    def __post_init__(self):
        n = int(np.prod(self.grid))
        if any(not 0 <= k < n for k in self.signal_patches):
            raise ValueError(f"signal patches {self.signal_patches} outside a grid of {n} cells")
        if self.signal_strength < 0:
            raise ValueError("signal_strength must be non-negative")
        if self.n_per_class < 1 or self.frames < 1:
            raise ValueError("n_per_class and frames must be >= 1")


def box_blur3(x: np.ndarray) -> np.ndarray:
    """3x3x3 box average over the last three axes with periodic boundaries."""
    out = np.zeros_like(x, dtype=np.float64)
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                out += np.roll(x, (dz, dy, dx), axis=(-3, -2, -1))
    return out / 27.0


def smooth_field(rng: np.random.Generator, shape) -> np.ndarray:
    """Spatially correlated Gaussian field with unit marginal variance."""
    # a periodic box blur of unit white noise has variance 1/27
    return box_blur3(rng.standard_normal(shape)) * np.sqrt(27.0)


def signal_mask(spec: SyntheticSpec) -> np.ndarray:
    """Boolean ``[D, H, W]`` mask of the voxels inside the signal cells."""
    grid = GridSpec(tuple(spec.grid))
    cells = np.zeros((grid.n_patches,) + grid.patch_extents(spec.extents), dtype=bool)
    cells[list(spec.signal_patches)] = True
    return merge_grid(cells, grid, spec.extents)


def generate_subject(spec: SyntheticSpec, index: int, label: int,
                     rng: np.random.Generator) -> SubjectSample:
    mask = signal_mask(spec)
    t1 = 1.0 + spec.noise_sigma * smooth_field(rng, spec.extents)
    # fMRI: one shared oscillation with a subject-specific phase, scaled per voxel
    phase = rng.uniform(0.0, 2.0 * np.pi)
    course = np.sin(2.0 * np.pi * np.arange(spec.frames) / spec.frames + phase)
    amp = np.ones(spec.extents)
    if label == 1:
        t1 = t1 - spec.signal_strength * mask
        amp = amp + spec.signal_strength * mask
    noise = spec.noise_sigma * smooth_field(rng, (spec.frames,) + tuple(spec.extents))
    fmri = course[:, None, None, None] * amp + noise
    return SubjectSample(t1=t1[None].astype(DTYPE), fmri=fmri[:, None].astype(DTYPE),
                         label=label, subject_id=f"sub-{index:04d}")


def generate_synthetic_cohort(spec: SyntheticSpec) -> list[SubjectSample]:
    """Labels alternate 0, 1, 0, 1, ...; each subject has its own spawned RNG stream."""
    n = 2 * spec.n_per_class
    streams = np.random.SeedSequence(spec.seed).spawn(n)
    return [generate_subject(spec, i, i % 2, np.random.default_rng(s)) for i, s in enumerate(streams)]


def split_train_test(cohort: Sequence[SubjectSample], fraction: float = 0.7,
                     seed: int = 0) -> tuple[list[SubjectSample], list[SubjectSample]]:
    """Stratified split; each class contributes ``round(fraction * n_class)`` to train.

    Both halves keep the cohort's original order.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    for label in sorted({s.label for s in cohort}):
        idx = [i for i, s in enumerate(cohort) if s.label == label]
        if len(idx) < 2:
            raise ValueError(f"class {label} has fewer than 2 samples")
        k = min(max(int(round(fraction * len(idx))), 1), len(idx) - 1)
        train_idx.extend(rng.permutation(idx)[:k].tolist())
    chosen = set(train_idx)
    train = [s for i, s in enumerate(cohort) if i in chosen]
    test = [s for i, s in enumerate(cohort) if i not in chosen]
    return train, test


def stack_batch(samples: Sequence[SubjectSample]) -> tuple[np.ndarray, np.ndarray, list[int]]:
    t1 = np.stack([s.t1 for s in samples])
    fmri = np.stack([s.fmri for s in samples])
    return t1, fmri, [s.label for s in samples]


def threshold_oracle_accuracy(cohort: Sequence[SubjectSample], spec: SyntheticSpec) -> float:
    """Accuracy of a midpoint threshold on the mean T1 intensity inside the signal cells."""
    mask = signal_mask(spec)
    score = np.array([s.t1[0][mask].mean() for s in cohort])
    labels = np.array([s.label for s in cohort])
    thr = 0.5 * (score[labels == 0].mean() + score[labels == 1].mean())
    pred = (score < thr).astype(int)  # class 1 is attenuated
    return float((pred == labels).mean())


# ---------------------------------------------------------------------------
# MVL1 volumes


def encode_volume(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def decode_volume(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one MVL1 record at ``offset``; returns ``(array, end_offset)``."""
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise TruncatedPayloadError("truncated header")
    (ndim,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if ndim > MAX_NDIM:
        raise ExtentOverflowError(f"ndim {ndim} exceeds {MAX_NDIM}")
    if len(buf) < pos + 4 * ndim:
        raise TruncatedPayloadError("truncated extents")
    extents = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    nbytes = 4
    for e in extents:
        nbytes *= e
        if nbytes > MAX_PAYLOAD:
            raise ExtentOverflowError(f"extents {extents} exceed the payload limit")
    if any(e == 0 for e in extents):
        raise ExtentOverflowError(f"zero extent in {extents}")
    if len(buf) < pos + nbytes:
        raise TruncatedPayloadError(f"payload has {len(buf) - pos} bytes, expected {nbytes}")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(extents)
    return arr.astype(DTYPE), pos + nbytes


def save_volume(t, path) -> None:
    Path(path).write_bytes(encode_volume(t))


def load_volume(path) -> Tensor:
    buf = Path(path).read_bytes()
    arr, end = decode_volume(buf)
    if end != len(buf):
        raise VolumeFormatError(f"{len(buf) - end} trailing bytes after payload")
    return Tensor(arr)


# ---------------------------------------------------------------------------
# exports


def export_pgm_slice(t, axis: int, index: int, path) -> np.ndarray:
    """Write one slice of ``t[D, H, W]`` as binary 8-bit PGM; returns the pixels."""
    vol = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {vol.shape}")
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"slice {index} out of range for axis {axis} of extent {vol.shape[axis]}")
    sl = np.take(vol, index, axis=axis)
    lo, hi = sl.min(), sl.max()
    if hi > lo:
        pix = np.round((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.zeros(sl.shape, dtype=np.uint8)
    rows, cols = pix.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pix.tobytes())
    return pix


CSV_HEADER = "run,seed,task,accuracy,precision,recall"


def export_metrics_csv(rows, path) -> None:
    """``rows``: iterable of objects/dicts with run, seed, task, accuracy, precision, recall."""
    lines = [CSV_HEADER]
    for r in rows:
        get = r.get if isinstance(r, dict) else lambda k, r=r: getattr(r, k)
        lines.append(f"{get('run')},{get('seed')},{get('task')},"
                     f"{get('accuracy'):.4f},{get('precision'):.4f},{get('recall'):.4f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def save_cohort(cohort: Sequence[SubjectSample], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = ["subject_id,label"]
    for s in cohort:
        save_volume(s.t1, out / f"{s.subject_id}_t1.mvl")
        save_volume(s.fmri, out / f"{s.subject_id}_fmri.mvl")
        labels.append(f"{s.subject_id},{s.label}")
    (out / "labels.csv").write_text("\n".join(labels) + "\n", encoding="ascii")


def load_cohort(in_dir) -> list[SubjectSample]:
    d = Path(in_dir)
    lines = (d / "labels.csv").read_text(encoding="ascii").split()
    cohort = []
    for line in lines[1:]:
        sid, label = line.split(",")
        cohort.append(SubjectSample(load_volume(d / f"{sid}_t1.mvl").data,
                                    load_volume(d / f"{sid}_fmri.mvl").data, int(label), sid))
    return cohort
