"""Typed run configuration and its flat ``section.key=value`` text form.

A run configuration groups three sections: ``model`` (:class:`MMViTConfig`),
``aug`` (:class:`AugmentConfig`) and ``train`` (:class:`TrainConfig`).
Files contain one assignment per line; ``#`` starts a comment. Unknown keys
are rejected so typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

from .embedding import ViewSpec


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


@dataclass(frozen=True)
class MMViTConfig:
    input: tuple = (1, 1024, 128)
    views: tuple = (ViewSpec((9, 9), (2, 2)), ViewSpec((13, 13), (4, 4)))
    embed_dim: int = 96
    stage_self_counts: tuple = (0, 0, 9, 1)
    heads: tuple = (1, 2, 4, 8)
    num_classes: int = 527
    task: str = "multilabel"
    dropout: float = 0.0
    mlp_ratio: float = 4.0
    q_pool_kernel: int = 3
    kv_pool_kernel: int = 1
    kv_pool_stride: int = 1
    init_seed: int = 0

    @property
    def num_stages(self) -> int:
        return len(self.stage_self_counts)

    @property
    def num_layers(self) -> int:
        return sum(self.stage_self_counts) + 2 * (self.num_stages - 1)

    def stage_channels(self, stage: int) -> int:
        """Channel width of 0-based ``stage``."""
        return self.embed_dim * 2 ** stage

    def validate(self) -> "MMViTConfig":
        c, h, w = self.input
        if min(c, h, w) < 1:
            raise ConfigError(f"model.input must be positive, got {self.input}")
        if len(self.views) < 1:
            raise ConfigError("model.views needs at least one view")
        for i, view in enumerate(self.views):
            view.check()
            if i and (view.stride[0] != 2 * self.views[i - 1].stride[0] or view.stride[1] != 2 * self.views[i - 1].stride[1]):
                raise ConfigError(f"model.views: view {i} stride {view.stride} must double view {i - 1}'s")
        if self.num_stages < 1:
            raise ConfigError("model.stage_self_counts must name at least one stage")
        if any(n < 0 for n in self.stage_self_counts):
            raise ConfigError("model.stage_self_counts must be non-negative")
        if len(self.heads) != self.num_stages:
            raise ConfigError(f"model.heads has {len(self.heads)} entries for {self.num_stages} stages")
        for s, heads in enumerate(self.heads):
            if heads < 1 or self.stage_channels(s) % heads:
                raise ConfigError(f"model.heads: stage {s + 1} width {self.stage_channels(s)} not divisible by {heads} heads")
        if self.task not in ("multilabel", "single-label"):
            raise ConfigError(f"model.task must be 'multilabel' or 'single-label', got {self.task!r}")
        if self.num_classes < 1:
            raise ConfigError("model.num_classes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if self.q_pool_kernel <= 2:
            raise ConfigError("model.q_pool_kernel must exceed the Q-pool stride of 2")
        if self.kv_pool_kernel < self.kv_pool_stride or (self.kv_pool_kernel == self.kv_pool_stride and self.kv_pool_stride != 1):
            raise ConfigError("model.kv_pool_kernel must exceed model.kv_pool_stride (or both be 1)")
        largest = max(max(v.stride) for v in self.views)
        factor = 2 ** (self.num_stages - 1)
        for axis, extent in (("H", h), ("W", w)):
            for stage in range(self.num_stages):
                need = largest * 2 ** stage
                if extent % need:
                    raise ConfigError(
                        f"input {axis}={extent} is not divisible by {need}: the last view's grid cannot be "
                        f"halved exactly entering stage {stage + 1} (need a multiple of {largest * factor})"
                    )
        return self

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            out[f"model.{f.name}"] = _format_value(getattr(self, f.name))
        return out

    def fingerprint(self) -> int:
        """64-bit hash of the canonical serialisation."""
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.to_flat().items()))
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    mixup_alpha: float = 0.5
    cutmix: bool = True
    specaug_max_time: int = 192
    specaug_max_freq: int = 48
    roll: bool = True
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1
    warmup_frac: float = 0.05
    clip_grad: float = 0.0
    weighted_sampling: bool = False
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    model: MMViTConfig = field(default_factory=MMViTConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> dict:
        out = self.model.to_flat()
        for section in ("aug", "train"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                out[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
        return out

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_flat().items())

    def with_overrides(self, overrides: Union[dict, Sequence[str]]) -> "RunConfig":
        if not isinstance(overrides, dict):
            overrides = dict(_split_assignment(item, "<override>", 0) for item in overrides)
        sections = {"model": self.model, "aug": self.aug, "train": self.train}
        changes: dict = {name: {} for name in sections}
        for key, raw in overrides.items():
            section, _, name = key.partition(".")
            if section not in sections or not name:
                raise ConfigError(f"unknown config key {key!r}")
            fields = {f.name: f for f in dataclasses.fields(sections[section])}
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(sections[section], name)
            changes[section][name] = _parse_value(key, raw, current) if isinstance(raw, str) else raw
        new = {name: dataclasses.replace(obj, **changes[name]) for name, obj in sections.items()}
        return RunConfig(**new)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], ViewSpec):
            return ",".join(v.format() for v in value)
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str, current: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if isinstance(current, tuple):
            if current and isinstance(current[0], ViewSpec):
                return tuple(ViewSpec.parse(item) for item in raw.split(","))
            kind = type(current[0]) if current else int
            return tuple(kind(item) for item in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _split_assignment(line: str, source: str, lineno: int) -> tuple:
    if "=" not in line:
        raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    return key.strip(), value.strip()


def parse_config(text: str, base: RunConfig | None = None, source: str = "<string>") -> RunConfig:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = _split_assignment(line, source, lineno)
        overrides[key] = value
    return (base or RunConfig()).with_overrides(overrides)


# -- presets ----------------------------------------------------------------

def audio_preset() -> RunConfig:
    return RunConfig()


def image_preset() -> RunConfig:
    model = MMViTConfig(input=(3, 224, 224), num_classes=1000, task="single-label")
    return RunConfig(model=model, train=TrainConfig(lr=5e-5, weight_decay=1e-2))


def tiny_preset() -> RunConfig:
    model = MMViTConfig(input=(1, 64, 32), embed_dim=48, stage_self_counts=(0, 0, 1, 1), num_classes=8, task="single-label")
    train = TrainConfig(lr=1e-3, weight_decay=0.0, batch_size=8, epochs=60)
    return RunConfig(model=model, aug=AugmentConfig(enabled=False), train=train)


PRESETS = {"audio": audio_preset, "image": image_preset, "tiny": tiny_preset}


def load_config(spec: str, overrides: Sequence[str] = ()) -> RunConfig:
    """Resolve a preset name or a config file path, then apply overrides.

    A file may start with ``preset=<name>`` to inherit from a preset.
    """
    if spec in PRESETS:
        cfg = PRESETS[spec]()
    else:
        path = Path(spec)
        if not path.is_file():
            raise ConfigError(f"no such preset or config file: {spec!r}")
        text = path.read_text()
        base = RunConfig()
        lines = []
        for line in text.splitlines():
            stripped = line.split("#", 1)[0].strip()
            if stripped.startswith("preset="):
                name = stripped.partition("=")[2].strip()
                if name not in PRESETS:
                    raise ConfigError(f"{spec}: unknown preset {name!r}")
                base = PRESETS[name]()
            else:
                lines.append(line)
        cfg = parse_config("\n".join(lines), base, source=str(path))
    cfg = cfg.with_overrides(list(overrides))
    cfg.model.validate()
    return cfg


__all__ = [
    "AugmentConfig",
    "ConfigError",
    "MMViTConfig",
    "PRESETS",
    "RunConfig",
    "TrainConfig",
    "audio_preset",
    "image_preset",
    "load_config",
    "parse_config",
    "tiny_preset",
]
