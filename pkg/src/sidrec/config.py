"""Flat key=value training configuration.

One dataclass holds every knob the harness exposes; files and --key=value
overrides both funnel through the same typed coercion, and unknown keys
fail loudly instead of being silently dropped.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class TrainingConfig:
    # codebook shape
    levels: int = 3
    codes_per_level: int = 64
    content_dim: int = 16
    collab_dim: int = 16
    # tokenizer network
    tokenizer_dim: int = 32
    tokenizer_blocks: int = 1
    tokenizer_heads: int = 2
    tokenizer_ff: int = 64
    # recommender network
    recommender_dim: int = 64
    recommender_blocks: int = 2
    recommender_heads: int = 2
    recommender_ff: int = 128
    n_max: int = 50
    # behavior head
    csa_hidden: int = 32
    # loss weights
    lambda1: float = 1.0
    lambda2: float = 1.0
    w_item: float = 0.5
    w_xtr: float = 0.5
    w_ref: float = 0.5
    eta: float = 0.1
    # link index
    gamma: float = 0.9
    delta_t: int = 100000
    capacity: int = 8
    offset: float = 100.0
    beam_width: int = 8
    decode_beam_width: int = 16
    # gradient filter threshold; any value <= 0 means the default
    # levels * ln(codes_per_level) / 2
    filter_threshold: float = -1.0
    # optimization
    lr_tokenizer: float = 0.003
    lr_recommender: float = 0.003
    lr_csa: float = 0.003
    # learning-rate multiplier applied to every component when the
    # dynamic phase begins; < 1 keeps phase 2 an adaptation regime
    dynamic_lr_scale: float = 0.02
    # freeze the item tokenizer during the dynamic phase
    offline: bool = False
    weight_decay: float = 0.01
    batch_size: int = 8
    # phase schedule: plateau detection with hard step caps
    warmup_steps: int = 800
    dynamic_steps: int = 2000
    plateau_rel_tol: float = 0.01
    plateau_patience: int = 5
    eval_interval: int = 200
    eval_users: int = 200
    seed: int = 7

    def resolved_filter_threshold(self) -> float:
        if self.filter_threshold > 0:
            return self.filter_threshold
        return self.levels * math.log(self.codes_per_level) * 0.5

    def validate(self):
        positive_ints = ("levels", "content_dim", "collab_dim", "tokenizer_dim",
                         "tokenizer_blocks", "tokenizer_heads", "tokenizer_ff",
                         "recommender_dim", "recommender_blocks",
                         "recommender_heads", "recommender_ff", "n_max",
                         "csa_hidden", "delta_t", "capacity", "beam_width",
                         "decode_beam_width", "batch_size", "warmup_steps",
                         "dynamic_steps", "plateau_patience", "eval_interval",
                         "eval_users")
        for name in positive_ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.codes_per_level < 2:
            raise ConfigError("codes_per_level must be >= 2")
        for name in ("lambda1", "lambda2", "w_item", "w_xtr", "w_ref", "eta",
                     "offset", "plateau_rel_tol", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lr_tokenizer", "lr_recommender", "lr_csa",
                     "dynamic_lr_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")
        if self.tokenizer_dim % self.tokenizer_heads or \
                self.recommender_dim % self.recommender_heads:
            raise ConfigError("model dim must be divisible by head count")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(TrainingConfig)}


def _coerce(key: str, raw: str):
    field = _FIELDS.get(key)
    if field is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    if field.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key!r} expects true/false, got {raw!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError:
        kind = "integer" if field.type in ("int", int) else "number"
        raise ConfigError(f"config key {key!r} expects {kind}, got {raw!r}")


def parse_config_text(text: str, path: str = "<config>") -> TrainingConfig:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{path}:{n}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    return TrainingConfig(**values).validate()


def load_config(path) -> TrainingConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), path=str(path))


def serialize_config(cfg: TrainingConfig) -> str:
    lines = []
    for f in dataclasses.fields(TrainingConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            lines.append(f"{f.name}={'true' if v else 'false'}")
        elif isinstance(v, float):
            lines.append(f"{f.name}={v!r}")
        else:
            lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainingConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))


def apply_overrides(cfg: TrainingConfig, overrides) -> TrainingConfig:
    """overrides: iterable of 'key=value' strings from the command line."""
    values = dataclasses.asdict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        values[key] = _coerce(key, raw)
    return TrainingConfig(**values).validate()


def config_hash(cfg: TrainingConfig) -> str:
    """Stable digest of the full configuration."""
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]
