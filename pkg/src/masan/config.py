"""Experiment configuration and its key=value text form.

The text form has one ``key = value`` pair per line, ``#`` starts a comment,
and nested settings use dotted keys (``encoder.channel_schedule = 4,8``).
Tuples are comma-separated, booleans are ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .autoencoders import EncoderConfig, LossConfig
from .classifier import MlpConfig
from .data import SyntheticSpec
from .model import FusionConfig
from .patching import GridSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSettings:
    """Cohort settings; the generator seed is the experiment seed."""
    n_per_class: int = 60
    extents: tuple[int, int, int] = (16, 16, 16)
    frames: int = 4
    signal_patches: tuple[int, ...] = (37, 38)
    signal_strength: float = 2.0
    noise_sigma: float = 0.5


@dataclass(frozen=True)
class EncoderSettings:
    channel_schedule: tuple[int, ...] = (4, 8)
    bottleneck_channels: int = 8
    target_extent: int = 2
    share_weights: bool = False
    gn_eps: float = 1e-5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    grid: tuple[int, int, int] = (4, 4, 4)
    lr: float = 0.001
    pretrain_steps: int = 200
    train_steps: int = 300
    batch_size: int = 4
    train_fraction: float = 0.7
    synthetic: SyntheticSettings = field(default_factory=SyntheticSettings)
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.pretrain_steps < 0 or self.train_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")

    # derived component configs

    def synthetic_spec(self) -> SyntheticSpec:
        s = self.synthetic
        return SyntheticSpec(seed=self.seed, n_per_class=s.n_per_class, extents=s.extents,
                             frames=s.frames, grid=self.grid, signal_patches=s.signal_patches,
                             signal_strength=s.signal_strength, noise_sigma=s.noise_sigma)

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid)

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        patch = self.grid_spec().patch_extents(self.synthetic.extents)
        return EncoderConfig.for_patch(patch[0], e.target_extent, channel_schedule=e.channel_schedule,
                                       bottleneck_channels=e.bottleneck_channels,
                                       share_weights=e.share_weights, gn_eps=e.gn_eps)

    def with_overrides(self, pairs: dict[str, str]) -> "ExperimentConfig":
        return apply_overrides(self, pairs)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(self))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    out = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.extend(flatten(v, key + "."))
        else:
            out.append((key, v))
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(like, tuple):
            items = [t for t in text.split(",") if t.strip()]
            kind = type(like[0]) if like else int
            return tuple(kind(t.strip()) for t in items)
        return type(like)(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def apply_overrides(cfg, pairs: dict[str, str], prefix: str = ""):
    """Return a copy of ``cfg`` with dotted-key string values applied."""
    names = {f.name for f in fields(cfg)}
    nested: dict[str, dict[str, str]] = {}
    direct = {}
    for key, text in pairs.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        sub = getattr(cfg, head)
        if rest:
            if not dataclasses.is_dataclass(sub):
                raise ConfigError(f"{prefix + head!r} has no sub-keys")
            nested.setdefault(head, {})[rest] = text
        elif dataclasses.is_dataclass(sub):
            raise ConfigError(f"{prefix + key!r} is a section; set its fields with dotted keys")
        else:
            direct[head] = _parse(text, sub, prefix + key)
    for head, sub_pairs in nested.items():
        direct[head] = apply_overrides(getattr(cfg, head), sub_pairs, prefix + head + ".")
    try:
        return replace(cfg, **direct)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{n}: expected key = value, got {raw.strip()!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        pairs.update(parse_pairs(p.read_text(encoding="utf-8"), str(p)))
    pairs.update(overrides or {})
    return apply_overrides(ExperimentConfig(), pairs)


def config_from_text(text: str) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), parse_pairs(text))
