"""Dataclass configs and strict JSON run-config loading."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or malformed configuration. Message names the offending key."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    expand: int = 2
    vocab_size: int = 256
    tied_embedding: bool = False
    d_conv: int = 4
    dt_rank: int = 4
    d_state: int = 16
    rmsnorm_eps: float = 1e-6
    stabilization_norms: bool = True

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(n_layers=64, d_model=4096, expand=2, vocab_size=65024, tied_embedding=False,
                   d_conv=4, dt_rank=16, d_state=16)

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "expand", "vocab_size", "d_conv", "dt_rank", "d_state"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if not self.rmsnorm_eps > 0:
            raise ConfigError("model.rmsnorm_eps must be > 0")
        return self


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1

    def validate(self) -> "OptimizerConfig":
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"trainer.optimizer.{name} must be in (0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("trainer.optimizer: eps must be > 0 and weight_decay >= 0")
        return self


@dataclass(frozen=True)
class ScheduleConfig:
    """Warmup-stable-decay schedule plus batch rampup. Times are in tokens."""

    eta_max: float = 6.4e-4
    eta_min_ratio: float = 1 / 256
    t_warmup: float = 1e9
    t_total: float = 5.8e12
    decay_fraction: float = 0.10
    t_stable_end: float | None = None
    b_min: int = 128
    b_max: int = 2048
    t_rampup: float = 50e9
    batch_scaling: bool = False
    batch_granularity: int = 1

    @property
    def stable_end(self) -> float:
        if self.t_stable_end is not None:
            return self.t_stable_end
        return self.t_total * (1.0 - self.decay_fraction)

    @property
    def t_decay(self) -> float:
        return self.t_total - self.stable_end

    @classmethod
    def full_scale(cls, batch_scaling: bool = False) -> "ScheduleConfig":
        return cls(batch_scaling=batch_scaling)

    def validate(self) -> "ScheduleConfig":
        if not (0 <= self.t_warmup < self.stable_end < self.t_total):
            raise ConfigError("schedule: need t_warmup < t_stable_end < t_total")
        if not 0 < self.eta_min_ratio <= 1 or self.eta_max < 0:
            raise ConfigError("schedule: eta_min_ratio must be in (0, 1] and eta_max >= 0")
        if not 1 <= self.b_min <= self.b_max:
            raise ConfigError("schedule: need 1 <= b_min <= b_max")
        if self.t_rampup < 0 or self.batch_granularity < 1:
            raise ConfigError("schedule: t_rampup >= 0 and batch_granularity >= 1 required")
        return self


@dataclass(frozen=True)
class Stage:
    name: str
    tokens: int
    seq_len: int
    mixture: dict = field(default_factory=dict)
    decay: bool = False


def validate_stages(stages: list[Stage], t_total: float | None = None) -> list[Stage]:
    if not stages:
        raise ConfigError("stages: at least one stage required")
    last = 0
    for i, st in enumerate(stages):
        if st.tokens <= 0 or st.seq_len < 2:
            raise ConfigError(f"stages[{i}]: tokens must be > 0 and seq_len >= 2")
        if st.decay and i != len(stages) - 1:
            raise ConfigError(f"stages[{i}]: only the final stage may be the decay stage")
        if not st.decay:
            if st.seq_len < last:
                raise ConfigError(f"stages[{i}].seq_len decreases ({st.seq_len} < {last})")
            last = st.seq_len
        if any(w < 0 for w in st.mixture.values()):
            raise ConfigError(f"stages[{i}].mixture: negative weight")
    if t_total is not None and not math.isclose(sum(s.tokens for s in stages), t_total, rel_tol=1e-12):
        raise ConfigError(f"stages: budgets sum to {sum(s.tokens for s in stages)}, schedule.t_total is {t_total}")
    return stages


@dataclass(frozen=True)
class TrainerConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    z_coeff: float = 0.0
    checkpoint_every: int = 0
    separator_id: int = 0


@dataclass(frozen=True)
class InferenceConfig:
    prefill: str = "parallel"
    chunk: int = 64
    max_new_tokens: int = 64
    temperature: float = 0.0
    stop_ids: tuple = ()


@dataclass(frozen=True)
class AttentionBaselineConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 256

    def validate(self) -> "AttentionBaselineConfig":
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError("bench.attention: d_model must equal n_heads * head_dim")
        return self


@dataclass(frozen=True)
class BenchConfig:
    record_every: int = 1000
    repetitions: int = 3
    warmup_steps: int = 32
    attention: AttentionBaselineConfig = field(default_factory=AttentionBaselineConfig)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    stages: tuple = ()
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------- strict loading

_NESTED = {
    ("TrainerConfig", "optimizer"): OptimizerConfig,
    ("BenchConfig", "attention"): AttentionBaselineConfig,
}


def _coerce(value: Any, annotation: str, where: str) -> Any:
    ann = annotation.replace(" ", "")
    if ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected boolean, got {value!r}")
        return value
    if ann == "int":
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return int(value)
    if ann in ("float", "float|None"):
        if value is None and ann.endswith("None"):
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if ann == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if ann == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected object, got {value!r}")
        return {str(k): float(_coerce(v, "float", f"{where}.{k}")) for k, v in value.items()}
    if ann == "tuple":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected array, got {value!r}")
        return tuple(_coerce(v, "int", f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported field type {annotation}")  # pragma: no cover


def from_dict(cls, data: Any, where: str):
    """Build dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{where}.{key}: unknown key")
        nested = _NESTED.get((cls.__name__, key))
        if nested is not None:
            kwargs[key] = from_dict(nested, value, f"{where}.{key}")
        else:
            kwargs[key] = _coerce(value, str(fields[key].type), f"{where}.{key}")
    return cls(**kwargs)


def run_config_from_dict(data: Any) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a JSON object")
    sections = {
        "model": ModelConfig,
        "schedule": ScheduleConfig,
        "trainer": TrainerConfig,
        "inference": InferenceConfig,
        "bench": BenchConfig,
    }
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key == "stages":
            if not isinstance(value, list):
                raise ConfigError("stages: expected array")
            kwargs["stages"] = tuple(from_dict(Stage, s, f"stages[{i}]") for i, s in enumerate(value))
        elif key in sections:
            kwargs[key] = from_dict(sections[key], value, key)
        else:
            raise ConfigError(f"{key}: unknown section")
    cfg = RunConfig(**kwargs)
    cfg.model.validate()
    cfg.schedule.validate()
    cfg.trainer.optimizer.validate()
    cfg.bench.attention.validate()
    if cfg.inference.prefill not in ("parallel", "sequential"):
        raise ConfigError("inference.prefill must be 'parallel' or 'sequential'")
    if cfg.stages:
        validate_stages(list(cfg.stages), cfg.schedule.t_total)
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return run_config_from_dict(data)
