"""Parameter containers and the per-patch layers shared by every network."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Parameter, Tensor


def gn_groups(channels: int) -> int:
    g = min(8, channels)
    return g if channels % g == 0 else 1


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Module:
    """Holds named parameters and child modules in construction order."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, Parameter] = {}
        self._children: list[Module] = []

    def param(self, suffix: str, data) -> Parameter:
        p = Parameter(f"{self.name}.{suffix}", data)
        self._params[suffix] = p
        return p

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params.values())
        for c in self._children:
            out.extend(c.parameters())
        return out

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for p in self.parameters():
            yield p.name, p


class PatchConv(Module):
    """Conv3d with one weight set per patch group (``groups`` = 1 when shared)."""

    def __init__(self, name, groups, cin, cout, kernel, stride, padding, rng):
        super().__init__(name)
        fan_in = cin * kernel ** 3
        self.w = self.param("w", uniform_fan_in(rng, (groups, cout, cin, kernel, kernel, kernel), fan_in))
        self.b = self.param("b", np.zeros((groups, cout), dtype=DTYPE))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.w, self.b, self.stride, self.padding)


class PatchGroupNorm(Module):
    def __init__(self, name, groups, channels, eps=1e-5):
        super().__init__(name)
        self.gamma = self.param("gamma", np.ones((groups, channels), dtype=DTYPE))
        self.beta = self.param("beta", np.zeros((groups, channels), dtype=DTYPE))
        self.n_groups = gn_groups(channels)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.n_groups, self.gamma, self.beta, self.eps, grouped=True)


class ResBlock(Module):
    """``[GN, ReLU, Conv] x 2`` plus identity (or 1x1x1 projection) residual."""

    def __init__(self, name, groups, cin, cout, rng, eps=1e-5):
        super().__init__(name)
        self.gn0 = self.child(PatchGroupNorm(f"{name}.gn0", groups, cin, eps))
        self.conv0 = self.child(PatchConv(f"{name}.conv0", groups, cin, cout, 3, 1, 1, rng))
        self.gn1 = self.child(PatchGroupNorm(f"{name}.gn1", groups, cout, eps))
        self.conv1 = self.child(PatchConv(f"{name}.conv1", groups, cout, cout, 3, 1, 1, rng))
        self.proj = self.child(PatchConv(f"{name}.proj", groups, cin, cout, 1, 1, 0, rng)) \
            if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv0(T.relu(self.gn0(x)))
        y = self.conv1(T.relu(self.gn1(y)))
        skip = self.proj(x) if self.proj is not None else x
        return T.add(skip, y)


class Linear(Module):
    def __init__(self, name, fan_in, fan_out, rng):
        super().__init__(name)
        self.w = self.param("w", uniform_fan_in(rng, (fan_in, fan_out), fan_in))
        self.b = self.param("b", np.zeros((fan_out,), dtype=DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        return T.add(y, T.expand(T.reshape(self.b, (1, -1)), y.shape))
