"""Run configuration and its flat ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are rejected.
Tuples are comma separated; ``auto`` leaves an optional value unset.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # phases and optimisation
    phases: int = 5
    epochs: int = 60
    batch_size: int = 128
    base_lr: float = 0.1
    momentum: float = 0.9
    warmup_epochs: int = 5
    lr_floor_ratio: float = 0.01
    # encoder
    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (128, 128)
    embed_dim: int = 16
    # self-supervised objective
    objective: str = "swav_lite"
    ssl_temperature: float | None = None
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 0.05
    # prototype clustering
    n_prototypes: int = 64
    n_centers: int = 32
    queue_mode: str = "prototypes"  # or "samples": queue rows join the Sinkhorn step as extra batch rows
    # embedding space reserving
    esr_lambda: float = 2.0
    chosen_proportion: float = 0.5
    alpha: float = 0.1
    alpha_schedule: str = "constant"
    alpha_stages: tuple[float, ...] = (0.0, 0.0, 0.25, 1e-3, 0.5, 1e-2, 0.75, 1e-1)
    # multi-teacher distillation
    gamma_initial: float = 0.01
    gamma_final: float = 1.0
    relation_tau: float = 0.1
    relation_symmetric: bool = True
    relation_keep_diagonal: bool = True
    # components (baseline keeps only SSL + past-teacher distillation)
    use_pc: bool = True
    use_esr: bool = True
    use_current_teacher: bool = True
    use_past_teacher: bool = True
    # data
    dataset: str = ""
    num_classes: int = 10
    per_class: int = 200
    difficulty: float = 0.5
    test_fraction: float = 0.2
    aug_noise: float = 0.1
    aug_mask: float = 0.1
    aug_scale_min: float = 0.9
    aug_scale_max: float = 1.1
    # linear probe
    probe_epochs: int = 100
    probe_lr: float = 0.1
    probe_batch: int = 256
    # seeds
    seed_model: int = 0
    seed_data: int = 0
    seed_split: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        positive = ["phases", "epochs", "base_lr", "embed_dim", "n_prototypes", "n_centers",
                    "relation_tau", "probe_epochs", "probe_lr", "probe_batch", "per_class", "input_dim"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs)")
        if self.esr_lambda < 1:
            raise ConfigError("esr_lambda must be >= 1")
        if not 0 < self.chosen_proportion < 1:
            raise ConfigError("chosen_proportion must be in (0, 1)")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.alpha_schedule not in ("constant", "staged"):
            raise ConfigError("alpha_schedule must be 'constant' or 'staged'")
        if len(self.alpha_stages) % 2 or not self.alpha_stages:
            raise ConfigError("alpha_stages must be fraction,value pairs")
        if self.objective not in ("swav_lite", "ntxent"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.queue_mode not in ("samples", "prototypes"):
            raise ConfigError("queue_mode must be 'samples' or 'prototypes'")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if not self.hidden_dims:
            raise ConfigError("hidden_dims must be non-empty")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def as_baseline(self) -> TrainConfig:
        return self.replace(use_pc=False, use_esr=False, use_current_teacher=False, use_past_teacher=True)

    @property
    def is_baseline(self) -> bool:
        return not (self.use_pc or self.use_esr or self.use_current_teacher)

    def alpha_pairs(self) -> tuple[tuple[float, float], ...]:
        s = self.alpha_stages
        return tuple((s[i], s[i + 1]) for i in range(0, len(s), 2))


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _base_type(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    hints = typing.get_type_hints(TrainConfig)
    tp, optional = _base_type(hints[key])
    raw = raw.strip()
    if optional and raw.lower() in ("auto", "none", ""):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typing.get_origin(tp) is tuple:
            (elem, _) = typing.get_args(tp)
            return tuple(elem(v.strip()) for v in raw.split(",") if v.strip())
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path, **overrides) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(), str(path))
    values.update(overrides)
    return TrainConfig(**values)


def format_value(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(config, f.name))}\n" for f in fields(config))
