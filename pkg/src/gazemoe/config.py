"""Run configuration: dataclasses, profiles and the flat ``key = value`` file format.

Config files are TOML restricted to dotted keys, for example::

    seed = 3
    model.layers = 2
    train.lr_max = 1e-4
    train.feature_combo = ["F1", "F2", "CNN"]

Unknown keys and type mismatches are rejected before anything runs.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

try:
    import tomllib as tomli
except ModuleNotFoundError:  # Python < 3.11
    import tomli

from gazemoe.errors import ConfigError

FAMILIES = ("F1", "F2", "PATCH", "CNN")
PROFILES = ("desk", "paper", "tiny")


@dataclass
class DataConfig:
    n: int = 2000
    seed: Optional[int] = None  # None: follow the run seed
    image_size: int = 32


@dataclass
class ModelConfig:
    patch_size: int = 8
    feature_dim: int = 64
    cnn_channels: int = 32
    cnn_grid: int = 4
    encoder_seed: int = 1234
    prototype_illum: int = 4
    prototype_head: int = 4
    prototype_bg: int = 4
    prototype_label: int = 8
    prototype_init_std: float = 0.02
    temperature_init: float = 10.0
    prototype_mode: str = "hard"
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    routed_experts: int = 8
    top_k: int = 4
    shared_experts: int = 4
    expert_ffn_dim: int = 128
    moe_layers: List[int] = field(default_factory=list)  # empty: every layer
    load_balance_coeff: float = 0.01
    dense_param_matched: bool = False
    cnn_positional: bool = False

    def prototype_counts(self) -> Dict[str, int]:
        return {"illum": self.prototype_illum, "head": self.prototype_head,
                "bg": self.prototype_bg, "label": self.prototype_label}

    def moe_layer_set(self) -> Tuple[int, ...]:
        return tuple(self.moe_layers) if self.moe_layers else tuple(range(self.layers))


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    feature_combo: List[str] = field(default_factory=lambda: list(FAMILIES))
    moe_enabled: bool = True


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def validate(self) -> "RunConfig":
        validate(self)
        return self

    def to_flat(self) -> Dict[str, Any]:
        return flatten(dataclasses.asdict(self))

    def dumps(self) -> str:
        return dump_flat(self.to_flat())


_PROFILE_OVERRIDES: Dict[str, Dict[str, Any]] = {
    "desk": {},
    # Values reported for the full-scale model; configuration-complete, not meant for CPU runs.
    "paper": {
        "data.image_size": 224, "model.patch_size": 32, "model.feature_dim": 512,
        "model.cnn_channels": 2048, "model.cnn_grid": 7,
        "model.d_model": 768, "model.layers": 12, "model.heads": 8,
        "model.routed_experts": 8, "model.top_k": 4, "model.shared_experts": 4,
        "model.expert_ffn_dim": 1024, "train.epochs": 100, "train.batch_size": 128,
    },
    # Small enough (< 1000 parameters) for exhaustive finite-difference checks.
    "tiny": {
        "data.n": 20, "data.image_size": 8, "model.patch_size": 4, "model.feature_dim": 4,
        "model.cnn_channels": 2, "model.cnn_grid": 2,
        "model.prototype_illum": 2, "model.prototype_head": 2, "model.prototype_bg": 2,
        "model.prototype_label": 2, "model.d_model": 4, "model.layers": 1, "model.heads": 2,
        "model.routed_experts": 3, "model.top_k": 2, "model.shared_experts": 1,
        "model.expert_ffn_dim": 4, "train.epochs": 1, "train.batch_size": 2,
    },
}


def flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize value {value!r}")


def dump_flat(flat: Dict[str, Any]) -> str:
    """Serialize to sorted ``key = value`` lines; ``None`` values are omitted."""
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(flat.items()) if v is not None)


def parse_flat(text: str, source: str = "<config>") -> Dict[str, Any]:
    try:
        return flatten(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig}


def _field_types() -> Dict[str, dataclasses.Field]:
    """Dotted key -> dataclass field for every configurable key."""
    out = {}
    for f in fields(RunConfig):
        if f.name in _SECTIONS:
            for sf in fields(_SECTIONS[f.name]):
                out[f"{f.name}.{sf.name}"] = sf
        else:
            out[f.name] = f
    return out


def _coerce(key: str, spec: dataclasses.Field, value: Any) -> Any:
    t = spec.type  # a string under postponed annotations
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {value!r}")
        return value
    if t in ("int", "Optional[int]"):
        if value is None and t.startswith("Optional"):
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {value!r}")
        return value
    if t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {value!r}")
        return float(value)
    if t == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    if t == "List[int]":
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"{key}: expected list of ints, got {value!r}")
        return list(value)
    if t == "List[str]":
        if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
            raise ConfigError(f"{key}: expected list of strings, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported field type {t}")


def apply_overrides(cfg: RunConfig, flat: Dict[str, Any]) -> RunConfig:
    types = _field_types()
    unknown = sorted(set(flat) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in flat.items():
        value = _coerce(key, types[key], value)
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, key, value)
    return cfg


def profile_config(profile: str = "desk") -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"profile: expected one of {PROFILES}, got {profile!r}")
    cfg = RunConfig(profile=profile)
    return apply_overrides(cfg, dict(_PROFILE_OVERRIDES[profile]))


def load_config(path: Union[str, Path, None] = None, profile: Optional[str] = None,
                overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Profile defaults, then the file, then explicit overrides; validated."""
    flat: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        flat = parse_flat(p.read_text(), str(p))
    chosen = profile or flat.get("profile", "desk")
    if not isinstance(chosen, str):
        raise ConfigError(f"profile: expected string, got {chosen!r}")
    cfg = profile_config(chosen)
    flat.pop("profile", None)
    apply_overrides(cfg, flat)
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.profile = chosen
    return cfg.validate()


def config_from_text(text: str) -> RunConfig:
    flat = parse_flat(text)
    cfg = profile_config(flat.pop("profile", "desk"))
    return apply_overrides(cfg, flat).validate()


def validate(cfg: RunConfig) -> None:
    m, t, d = cfg.model, cfg.train, cfg.data
    errors: List[str] = []

    def need(ok: bool, message: str) -> None:
        if not ok:
            errors.append(message)

    need(1 <= m.top_k <= m.routed_experts,
         f"model.top_k ({m.top_k}) must satisfy 1 <= model.top_k <= model.routed_experts ({m.routed_experts})")
    need(m.heads >= 1 and m.d_model % m.heads == 0,
         f"model.d_model ({m.d_model}) must be divisible by model.heads ({m.heads})")
    need(m.load_balance_coeff >= 0, f"model.load_balance_coeff ({m.load_balance_coeff}) must be >= 0")
    need(m.shared_experts >= 0, "model.shared_experts must be >= 0")
    need(m.layers >= 0, "model.layers must be >= 0")
    need(all(0 <= i < m.layers for i in m.moe_layers),
         f"model.moe_layers {m.moe_layers} must index layers in [0, {m.layers})")
    need(m.prototype_mode in ("hard", "soft"), f"model.prototype_mode must be 'hard' or 'soft', got {m.prototype_mode!r}")
    need(m.temperature_init > 0, "model.temperature_init must be > 0")
    need(min(m.prototype_counts().values()) >= 1, "model.prototype_* counts must be >= 1")
    need(d.image_size % m.patch_size == 0,
         f"data.image_size ({d.image_size}) must be divisible by model.patch_size ({m.patch_size})")
    need(d.image_size % m.cnn_grid == 0,
         f"data.image_size ({d.image_size}) must be divisible by model.cnn_grid ({m.cnn_grid})")
    need(d.n >= 10, f"data.n ({d.n}) must be >= 10")
    need(0 < t.lr_min <= t.lr_max, f"train.lr_min ({t.lr_min}) must satisfy 0 < lr_min <= train.lr_max ({t.lr_max})")
    need(t.batch_size >= 1, f"train.batch_size ({t.batch_size}) must be >= 1")
    need(t.epochs >= 1, f"train.epochs ({t.epochs}) must be >= 1")
    need(t.weight_decay >= 0, "train.weight_decay must be >= 0")
    need(0 <= t.beta1 < 1 and 0 <= t.beta2 < 1, "train.beta1/train.beta2 must lie in [0, 1)")
    need(t.grad_clip >= 0, "train.grad_clip must be >= 0")
    need(bool(t.feature_combo) and set(t.feature_combo) <= set(FAMILIES)
         and len(set(t.feature_combo)) == len(t.feature_combo),
         f"train.feature_combo {t.feature_combo} must be a non-empty subset of {list(FAMILIES)}")
    need(cfg.profile in PROFILES, f"profile must be one of {PROFILES}")
    need(all(math.isfinite(v) for v in (t.lr_max, t.lr_min, t.weight_decay, m.load_balance_coeff)),
         "learning rates and coefficients must be finite")
    if errors:
        raise ConfigError("; ".join(errors))
