"""MLP head, cross-entropy and the weighted total objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .autoencoders import LossConfig
from .nn import Linear, Module
from .tensor import DTYPE, ShapeError, Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class MlpConfig:
    hidden: tuple[int, ...] = (256, 64)
    n_classes: int = 2

    def __post_init__(self):
        if any(w < 1 for w in self.hidden):
            raise ValueError("hidden widths must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")


@dataclass
class Prediction:
    logits: Tensor
    probs: Tensor


@dataclass
class LossBreakdown:
    L_s: Tensor
    L_f: Tensor
    L_reg: Tensor
    L_total: Tensor

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("L_s", "L_f", "L_reg", "L_total")}


class MLP(Module):
    def __init__(self, name: str, in_features: int, cfg: MlpConfig, rng: np.random.Generator):
        super().__init__(name)
        self.cfg = cfg
        self.in_features = in_features
        widths = [in_features, *cfg.hidden, cfg.n_classes]
        self.layers = [self.child(Linear(f"{name}.fc{i}", a, b, rng))
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]


def mlp_forward(fused: Tensor, mlp: MLP) -> Prediction:
    """Flatten each sample's features and run the MLP; softmax on the last layer."""
    x = T.reshape(fused, (fused.shape[0], -1))
    if x.shape[1] != mlp.in_features:
        raise ShapeError(f"MLP built for width {mlp.in_features}, got {x.shape[1]}")
    for i, layer in enumerate(mlp.layers):
        x = layer(x)
        if i < len(mlp.layers) - 1:
            x = T.relu(x)
    return Prediction(x, T.softmax(x, axis=-1))


def one_hot(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1
    return out


def cross_entropy(pred: Prediction, labels: Sequence[int]) -> Tensor:
    """Mean of ``-log p(true class)`` with probabilities floored at 1e-12."""
    N, C = pred.probs.shape
    if len(labels) != N:
        raise ShapeError(f"{len(labels)} labels for {N} predictions")
    oh = Tensor(one_hot(labels, C))
    logp = T.log(pred.probs, floor=PROB_FLOOR)
    return T.scale(T.reduce("sum", T.mul(oh, logp)), -1.0 / N)


def total_loss(L_s: Tensor, L_f: Tensor, L_reg: Tensor, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """``alpha * L_s + beta * L_f + L_reg``."""
    for t in (L_s, L_f, L_reg):
        if not np.isfinite(t.data).all():
            raise ValueError("loss components must be finite")
    total = T.add(T.add(T.scale(L_s, cfg.alpha), T.scale(L_f, cfg.beta)), L_reg)
    return LossBreakdown(L_s, L_f, L_reg, total)
