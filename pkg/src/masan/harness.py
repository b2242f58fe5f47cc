"""Pretraining, end-to-end training, evaluation, ablation and map export."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .autoencoders import modality_recon_loss
from .checkpoint import Checkpoint
from .classifier import cross_entropy, total_loss
from .config import ExperimentConfig
from .data import (SubjectSample, export_pgm_slice, generate_synthetic_cohort, save_volume,
                   split_train_test, stack_batch)
from .model import MASAN
from .optim import AdamState, adam_step
from .patching import split_grid
from .tensor import ShapeError, Tape, Tensor, backward, no_tape

log = logging.getLogger(__name__)

TASK = "AD_vs_NC"
TRACE_HEADER = "step,L_s,L_f,L_reg,L_total,batch"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: MASAN
    trace: list[dict] = field(default_factory=list)

    @property
    def batch_hashes(self) -> list[str]:
        return [r["batch"] for r in self.trace]


def build_model(cfg: ExperimentConfig) -> MASAN:
    s = cfg.synthetic
    return MASAN(s.extents, s.frames, cfg.grid_spec(), cfg.encoder_config(), cfg.mlp, cfg.fusion, cfg.seed)


def model_from_checkpoint(ck: Checkpoint) -> MASAN:
    model = build_model(ck.config)
    model.load_state(ck.params)
    return model


def _as_model(m) -> MASAN:
    return model_from_checkpoint(m) if isinstance(m, Checkpoint) else m


def batch_hash(samples: Sequence[SubjectSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.subject_id.encode("utf-8"))
        h.update(np.ascontiguousarray(s.t1).tobytes())
        h.update(np.ascontiguousarray(s.fmri).tobytes())
    return h.hexdigest()[:16]


def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list[list[int]]:
    """Index batches drawn from consecutive shuffled epochs; epoch leftovers are dropped."""
    if n < 1:
        raise ValueError("cannot draw batches from an empty set")
    b = min(batch_size, n)
    rng = np.random.default_rng([seed, 0xBA7C4])
    out: list[list[int]] = []
    while len(out) < steps:
        perm = rng.permutation(n)
        for i in range(0, n - b + 1, b):
            out.append(perm[i:i + b].tolist())
            if len(out) == steps:
                break
    return out


def _check_finite(step: int, phase: str, **losses: Tensor) -> None:
    bad = [k for k, v in losses.items() if not np.isfinite(v.data).all()]
    if bad:
        raise TrainingDiverged(f"{phase}: non-finite {', '.join(bad)} at step {step}")


def _autoencode(model: MASAN, samples: Sequence[SubjectSample]):
    t1, fmri, _ = stack_batch(samples)
    xs, xf = model.patches(t1, fmri)
    es, ef = model.spm.encode(xs), model.fpm.encode(xf)
    return xs, xf, es, ef, model.spm.decode(es), model.fpm.decode(ef)


def reconstruction_mse(model: MASAN, samples: Sequence[SubjectSample]) -> float:
    """Mean of the per-voxel squared reconstruction errors of both modalities."""
    with no_tape():
        xs, xf, _, _, rs, rf = _autoencode(model, samples)
    ms = float(np.mean((rs.data.astype(np.float64) - xs.data) ** 2))
    mf = float(np.mean((rf.data.astype(np.float64) - xf.data) ** 2))
    return 0.5 * (ms + mf)


def pretrain_autoencoders(cfg: ExperimentConfig, cohort: Sequence[SubjectSample]) -> TrainResult:
    """Adam on ``L_s + L_f`` over the autoencoder parameters only."""
    if not cohort:
        raise ValueError("pretraining needs a non-empty cohort")
    model = build_model(cfg)
    params = model.autoencoder_parameters()
    adam = AdamState()
    trace = []
    for step, idx in enumerate(batch_schedule(len(cohort), cfg.batch_size, cfg.pretrain_steps, cfg.seed)):
        batch = [cohort[i] for i in idx]
        n = len(batch)
        with Tape() as tape:
            xs, xf, es, ef, rs, rf = _autoencode(model, batch)
            L_s = modality_recon_loss(rs, xs, es.h, cfg.loss, n)
            L_f = modality_recon_loss(rf, xf, ef.h, cfg.loss, n)
            _check_finite(step, "pretrain", L_s=L_s, L_f=L_f)
            loss = T.add(L_s, L_f)
        backward(loss, tape, params)
        adam_step(params, None, adam, cfg.lr)
        rec = {"step": step, "L_s": L_s.item(), "L_f": L_f.item(), "L_reg": 0.0,
               "L_total": loss.item(), "batch": batch_hash(batch)}
        trace.append(rec)
        log.info("pretrain step %d loss %.6g", step, rec["L_total"])
    return TrainResult(Checkpoint(cfg, model.state(), adam), model, trace)


def train_end_to_end(cfg: ExperimentConfig, train: Sequence[SubjectSample],
                     init: Checkpoint | None = None) -> TrainResult:
    """Adam on ``alpha * L_s + beta * L_f + L_reg`` over every parameter.

    ``init`` supplies starting weights (e.g. a pretraining checkpoint); the
    optimizer state always starts fresh.
    """
    if not train:
        raise ValueError("training needs a non-empty training split")
    model = build_model(cfg)
    if init is not None:
        model.load_state(init.params)
    params = model.parameters()
    adam = AdamState()
    trace = []
    for step, idx in enumerate(batch_schedule(len(train), cfg.batch_size, cfg.train_steps, cfg.seed)):
        batch = [train[i] for i in idx]
        t1, fmri, labels = stack_batch(batch)
        with Tape() as tape:
            out = model.forward(t1, fmri)
            L_s, L_f = model.reconstruction_losses(out, cfg.loss)
            L_reg = cross_entropy(out.prediction, labels)
            _check_finite(step, "train", L_s=L_s, L_f=L_f, L_reg=L_reg)
            lb = total_loss(L_s, L_f, L_reg, cfg.loss)
        backward(lb.L_total, tape, params)
        adam_step(params, None, adam, cfg.lr)
        rec = dict(step=step, **lb.values(), batch=batch_hash(batch))
        trace.append(rec)
        log.info("train step %d loss %.6g (L_reg %.4g)", step, rec["L_total"], rec["L_reg"])
    return TrainResult(Checkpoint(cfg, model.state(), adam), model, trace)


def format_trace(trace: Sequence[dict]) -> str:
    lines = [TRACE_HEADER]
    for r in trace:
        lines.append(f"{r['step']},{r['L_s']!r},{r['L_f']!r},{r['L_reg']!r},{r['L_total']!r},{r['batch']}")
    return "\n".join(lines) + "\n"


def write_trace(trace: Sequence[dict], path) -> None:
    Path(path).write_text(format_trace(trace), encoding="ascii")


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, predicted: Sequence[int], labels: Sequence[int]) -> "ConfusionCounts":
        p = np.asarray(predicted) == 1
        y = np.asarray(labels) == 1
        if p.shape != y.shape:
            raise ShapeError(f"{p.size} predictions for {y.size} labels")
        return cls(int((p & y).sum()), int((p & ~y).sum()), int((~p & y).sum()), int((~p & ~y).sum()))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    accuracy: float
    precision: float
    recall: float
    precision_undefined: bool = False
    recall_undefined: bool = False
    run: str = "model"
    seed: int = 0
    task: str = TASK


def metrics_from_counts(c: ConfusionCounts, run: str = "model", seed: int = 0) -> MetricsReport:
    """Class 1 is positive; a metric with a zero denominator is 0 and flagged."""
    if c.total == 0:
        raise ValueError("no evaluated samples")
    p_den, r_den = c.tp + c.fp, c.tp + c.fn
    return MetricsReport(c, (c.tp + c.tn) / c.total,
                         c.tp / p_den if p_den else 0.0,
                         c.tp / r_den if r_den else 0.0,
                         p_den == 0, r_den == 0, run, seed)


def predict(model, samples: Sequence[SubjectSample]) -> np.ndarray:
    model = _as_model(model)
    t1, fmri, _ = stack_batch(samples)
    with no_tape():
        out = model.forward(t1, fmri, reconstruct=False)
    return out.prediction.probs.data.argmax(axis=1)


def evaluate(model, test: Sequence[SubjectSample], run: str = "model", seed: int = 0) -> MetricsReport:
    if not test:
        raise ValueError("evaluation needs a non-empty test split")
    pred = predict(model, test)
    counts = ConfusionCounts.from_predictions(pred, [s.label for s in test])
    return metrics_from_counts(counts, run, seed)


# ---------------------------------------------------------------------------
# end-to-end experiments


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    pretrain: TrainResult | None
    train: TrainResult
    report: MetricsReport
    test_set: list[SubjectSample]


def run_experiment(cfg: ExperimentConfig, cohort: Sequence[SubjectSample] | None = None,
                   run: str = "model") -> ExperimentResult:
    """Synthesize (unless given), split, optionally pretrain, train and evaluate."""
    if cohort is None:
        cohort = generate_synthetic_cohort(cfg.synthetic_spec())
    train, test = split_train_test(cohort, cfg.train_fraction, cfg.seed)
    pre = pretrain_autoencoders(cfg, train) if cfg.pretrain_steps > 0 else None
    result = train_end_to_end(cfg, train, pre.checkpoint if pre else None)
    report = evaluate(result.model, test, run, cfg.seed)
    return ExperimentResult(cfg, pre, result, report, list(test))


METRICS = ("accuracy", "precision", "recall")


@dataclass
class AblationResult:
    attention: list[ExperimentResult]
    addition: list[ExperimentResult]

    @property
    def rows(self) -> list[MetricsReport]:
        out = []
        for a, b in zip(self.attention, self.addition):
            out += [a.report, b.report]
        return out

    def deltas(self) -> list[dict[str, float]]:
        """Per seed: attention minus addition for each metric."""
        return [{m: getattr(a.report, m) - getattr(b.report, m) for m in METRICS}
                for a, b in zip(self.attention, self.addition)]

    def means(self, arm: str) -> dict[str, float]:
        runs = getattr(self, arm)
        return {m: float(np.mean([getattr(r.report, m) for r in runs])) for m in METRICS}

    def mean_deltas(self) -> dict[str, float]:
        a, b = self.means("attention"), self.means("addition")
        return {m: a[m] - b[m] for m in METRICS}


def paired_configs(cfg: ExperimentConfig, seed: int) -> tuple[ExperimentConfig, ExperimentConfig]:
    base = replace(cfg, seed=seed)
    att = replace(base, fusion=replace(cfg.fusion, mode="attention"))
    add = replace(base, fusion=replace(cfg.fusion, mode="addition"))
    diff = [a for a, b in zip(att.to_text().splitlines(), add.to_text().splitlines()) if a != b]
    if diff != ["fusion.mode = attention"]:
        raise AssertionError(f"paired configs differ beyond the fusion mode: {diff}")
    return att, add


def run_ablation(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> AblationResult:
    """Train attention and addition fusion on identical data and batches per seed."""
    result = AblationResult([], [])
    for seed in seeds:
        att_cfg, add_cfg = paired_configs(cfg, seed)
        cohort = generate_synthetic_cohort(att_cfg.synthetic_spec())
        att = run_experiment(att_cfg, cohort, "attention")
        add = run_experiment(add_cfg, cohort, "addition")
        if att.train.batch_hashes != add.train.batch_hashes:
            raise AssertionError(f"seed {seed}: ablation arms consumed different batches")
        result.attention.append(att)
        result.addition.append(add)
        log.info("seed %d accuracy attention %.4f addition %.4f", seed, att.report.accuracy,
                 add.report.accuracy)
    return result


# ---------------------------------------------------------------------------
# embedding maps


def embedding_map(model, sample: SubjectSample) -> np.ndarray:
    """Per-region mean |fused feature| painted into the grid: ``[D, H, W]``."""
    model = _as_model(model)
    t1 = np.asarray(sample.t1)[None]
    fmri = np.asarray(sample.fmri)[None]
    with no_tape():
        out = model.forward(t1, fmri, reconstruct=False)
    return model.embedding_map(out.fused.features)[0]


def export_embedding_map(model, sample: SubjectSample, path_prefix) -> np.ndarray:
    """Write ``<prefix>.mvl`` (full map) and ``<prefix>_axial.pgm`` (middle axial slice)."""
    vol = embedding_map(model, sample)
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_volume(Tensor(vol), prefix.with_name(prefix.name + ".mvl"))
    export_pgm_slice(vol, 0, vol.shape[0] // 2, prefix.with_name(prefix.name + "_axial.pgm"))
    return vol


def signal_contrast(vol: np.ndarray, cfg: ExperimentConfig) -> tuple[float, float]:
    """Mean map value over the signal cells and over the remaining cells."""
    cells = split_grid(vol, cfg.grid_spec()).reshape(cfg.grid_spec().n_patches, -1).mean(axis=1)
    sig = list(cfg.synthetic.signal_patches)
    bg = np.delete(cells, sig)
    return float(cells[sig].mean()), float(bg.mean())
