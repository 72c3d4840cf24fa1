"""Experiment configuration: nested dataclasses with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .features import FeatureConfig
from .prompt_encoder import KLAnnealing, PromptConfig


class ConfigKeyError(KeyError):
    pass


@dataclass
class ScheduleConfig:
    beta_min: float = 1e-4
    beta_max: float = 0.05
    duration_steps: int = 5
    semantic_steps: int = 200
    acoustic_steps: int = 200
    wave_steps: int = 50

    def steps(self, kind: str) -> int:
        return getattr(self, f"{kind}_steps")


@dataclass
class CTAPSection:
    d: int = 512
    phoneme_dim: int = 256
    speech_layers: int = 6
    phoneme_layers: int = 4
    heads: int = 8
    ff_dim: int = 2048
    dropout: float = 0.0
    decoder_hidden: int = 256
    decoder_layers: int = 3
    temperature_init: float = 0.07


@dataclass
class DenoiserSection:
    """Overrides applied on top of the per-kind defaults; None keeps the default."""

    n_layers: Optional[int] = None
    n_blocks: Optional[int] = None
    channels: Optional[int] = None
    kernel: Optional[int] = None
    step_embed_dim: Optional[int] = None
    step_hidden: Optional[int] = None
    cond_encoder_layers: Optional[int] = None
    cond_encoder_dim: Optional[int] = None
    cond_encoder_heads: Optional[int] = None

    def overrides(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class DenoisersConfig:
    acoustic: DenoiserSection = field(default_factory=DenoiserSection)
    semantic: DenoiserSection = field(default_factory=DenoiserSection)
    duration: DenoiserSection = field(default_factory=DenoiserSection)
    wave: DenoiserSection = field(default_factory=DenoiserSection)


@dataclass
class PromptSection:
    conv_channels: list[int] = field(default_factory=lambda: [32, 32, 64, 64, 128, 256])
    se_reduction: int = 8
    feature_dim: int = 128
    embed_dim: int = 64
    crop_seconds: float = 3.0
    kl_margin: float = 1.0
    kl: KLAnnealing = field(default_factory=KLAnnealing)
    sample_at_inference: bool = False
    train_in_ctap: bool = True
    finetune_in_s2s: bool = True


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 12
    seed: int = 0
    ctap_steps: int = 20000
    duration_steps: int = 20000
    semantic_steps: int = 50000
    acoustic_steps: int = 50000
    wave_steps: int = 50000
    acoustic_crop_frames: int = 200
    wave_crop_samples: int = 16000
    ctap_crop_frames: int = 0
    checkpoint_every: int = 1000
    grad_clip: Optional[float] = 1.0


@dataclass
class SynthConfig:
    min_duration: int = 1


@dataclass
class ExperimentConfig:
    vocab_size: int = 100
    features: FeatureConfig = field(default_factory=FeatureConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ctap: CTAPSection = field(default_factory=CTAPSection)
    prompt: PromptSection = field(default_factory=PromptSection)
    denoisers: DenoisersConfig = field(default_factory=DenoisersConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @property
    def prompt_frames(self) -> int:
        f = self.features
        return int(round(self.prompt.crop_seconds * f.sample_rate / f.hop))

    def prompt_config(self) -> PromptConfig:
        p = self.prompt
        return PromptConfig(n_mels=self.features.n_mels, embed_dim=p.embed_dim,
                            crop_frames=self.prompt_frames, conv_channels=list(p.conv_channels),
                            se_reduction=p.se_reduction, feature_dim=p.feature_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigKeyError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigKeyError(f"unknown config key(s) at {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = hints[name]
        kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
    return cls(**kwargs)


def from_dict(data: dict, cls=ExperimentConfig):
    return _build(cls, data or {}, "")


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(item: str) -> dict:
    """``a.b.c=value`` -> {"a": {"b": {"c": value}}}; value parsed as YAML."""
    if "=" not in item:
        raise ConfigKeyError(f"override must look like key.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: list[str] = ()) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
    for item in overrides:
        data = merge(data, parse_override(item))
    return from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")
    os.replace(tmp, path)
