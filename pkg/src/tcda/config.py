"""Run configuration as plain ``key = value`` text.

Blank lines and ``#`` comments are ignored. Tuples are comma separated.
``TCDA_SEED`` in the environment overrides the configured seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    origin = typing.get_origin(kind)
    if origin is tuple:
        (inner, _) = typing.get_args(kind)
        return tuple(_parse_value(part, inner) for part in raw.split(",") if part.strip())
    raise ConfigError(f"unsupported field type {kind}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class KeyValueConfig:
    """Mixin giving dataclasses a lossless key-value text form."""

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, env: bool = True):
        hints = typing.get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse_value(raw, hints[key])
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {key}: {exc}") from None
        if env and "seed" in known and os.environ.get("TCDA_SEED"):
            values["seed"] = int(os.environ["TCDA_SEED"])
        return cls(**values)

    @classmethod
    def load(cls, path, env: bool = True):
        return cls.from_text(Path(path).read_text(encoding="utf-8"), env=env)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


@dataclass(frozen=True)
class PipelineConfig(KeyValueConfig):
    d: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    gcn_layers: int = 3
    dag_layers: int = 2
    window: int = 3
    topk_ratio: float = 0.8
    theta_mic: float = 10000.0
    theta_mac: float = 100.0
    dropout: float = 0.1
    batch_size: int = 2
    lr_encoder: float = 1e-5
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 300
    patience: int = 20
    seed: int = 0
    weights_ent: tuple[float, ...] = (0.25, 1.0, 1.0, 1.0)
    weights_pair: tuple[float, ...] = (0.25, 1.0, 1.0)
    weights_pol: tuple[float, ...] = (0.25, 1.0, 1.0, 1.0)
    graph: str = "tc"
    position: str = "drope"
    head_dim: int = 0
    rotary_dim: int = 0
    sem_topk: int = 3
    max_speakers: int = 8
    target_train_f1: float = 0.0
    eval_every: int = 1

    def __post_init__(self) -> None:
        positive = ("d", "encoder_layers", "encoder_heads", "gcn_layers", "dag_layers", "window",
                    "batch_size", "epochs", "patience", "sem_topk", "max_speakers", "eval_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.topk_ratio <= 1:
            raise ConfigError("topk_ratio must lie in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.lr_encoder <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rates must be positive and weight decay non-negative")
        if not self.theta_mic > self.theta_mac > 1:
            raise ConfigError("need theta_mic > theta_mac > 1")
        if self.graph not in ("tc", "standard", "reply"):
            raise ConfigError(f"unknown graph variant {self.graph!r}")
        if self.position not in ("drope", "rope"):
            raise ConfigError(f"unknown position scheme {self.position!r}")
        if self.d % self.encoder_heads:
            raise ConfigError("d must be divisible by encoder_heads")
        if self.resolved_rotary_dim % 4:
            raise ConfigError("rotary dimension must be a multiple of 4")
        if (len(self.weights_ent), len(self.weights_pair), len(self.weights_pol)) != (4, 3, 4):
            raise ConfigError("class weights need 4/3/4 entries (other first)")

    @property
    def resolved_head_dim(self) -> int:
        return self.head_dim or self.d

    @property
    def resolved_rotary_dim(self) -> int:
        return self.rotary_dim or self.resolved_head_dim

    @property
    def class_weights(self) -> dict[str, tuple[float, ...]]:
        return {"ent": self.weights_ent, "pair": self.weights_pair, "pol": self.weights_pol}


@dataclass(frozen=True)
class SyntheticSpec(KeyValueConfig):
    n_dialogues: int = 20
    vocab_size: int = 40
    min_utterances: int = 6
    max_utterances: int = 12
    branching: int = 3
    speakers: int = 4
    quads_per_dialogue: int = 3
    filler_min: int = 1
    filler_max: int = 3
    distractors: bool = True
    interleave: bool = False
    root_target_rate: float = 0.5
    seed: int = 1
    dev_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.n_dialogues < 1 or self.vocab_size < 4 or self.speakers < 1 or self.branching < 1:
            raise ConfigError("n_dialogues, vocab_size, speakers and branching must be positive")
        if not 2 <= self.min_utterances <= self.max_utterances:
            raise ConfigError("need 2 <= min_utterances <= max_utterances")
        if not 0 <= self.filler_min <= self.filler_max:
            raise ConfigError("need 0 <= filler_min <= filler_max")
        if self.quads_per_dialogue < 0:
            raise ConfigError("quads_per_dialogue must be non-negative")
        if not 0 <= self.root_target_rate <= 1 or not 0 <= self.dev_fraction < 1:
            raise ConfigError("rates must lie in [0, 1]")


def config_fields(cls) -> list[str]:
    return [f.name for f in fields(cls)]


__all__ = ["ConfigError", "PipelineConfig", "SyntheticSpec", "config_fields"]
