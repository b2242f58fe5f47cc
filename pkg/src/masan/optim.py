"""Bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Sequence[Parameter], grads: dict[str, np.ndarray] | None, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Apply one Adam update in place and return the (mutated) state.

    ``grads`` maps parameter names to gradients; when ``None`` each
    parameter's ``.grad`` is used.
    """
    if not (0 < beta1 < 1 and 0 < beta2 < 1):
        raise ValueError(f"Adam betas must lie in (0, 1), got {beta1}, {beta2}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.shape}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        # moments are stored in float32 but updated in float64
        g = np.array(g, dtype=np.float64)  # a private copy: updated in place below
        m = state.m[p.name].astype(np.float64)
        m *= beta1
        m += (1 - beta1) * g
        g *= g
        g *= 1 - beta2
        v = state.v[p.name].astype(np.float64)
        v *= beta2
        v += g
        state.m[p.name][...] = m
        state.v[p.name][...] = v
        v /= c2
        np.sqrt(v, out=v)
        v += eps
        m *= lr / c1
        m /= v
        p.data[...] = p.data - m
    return state
