"""Pipeline configuration: nested dataclasses with JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field

from .data import DatasetSpec
from .encoder import EncoderConfig, EncoderTrainConfig
from .errors import ConfigError
from .imagegen import GenConfig, GuidanceConfig
from .rdm import RdmConfig, SamplerConfig
from .training import TrainConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


def _desk_rdm():
    return RdmConfig(rep_dim=64, num_blocks=3, hidden_dim=256, timestep_embed_dim=64,
                     class_embed_dim=64)


@dataclass
class PipelineConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(projection_dim=64))
    encoder_train: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    rdm: RdmConfig = field(default_factory=_desk_rdm)
    rdm_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=4000, batch_size=512, lr=1e-3,
                                            lr_schedule="cosine"))
    gen: GenConfig = field(default_factory=lambda: GenConfig(rep_dim=64, timestep_embed_dim=128))
    gen_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(steps=3000, batch_size=128, lr=1e-3,
                                            weight_decay=0.05, beta2=0.95,
                                            lr_schedule="cosine"))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    rdm_sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(ddim_steps=100))
    gen_sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(ddim_steps=50))
    guidance: GuidanceConfig = field(default_factory=lambda: GuidanceConfig(tau=1.0))
    num_samples: int = 1000
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        D = self.encoder.projection_dim
        if self.rdm.rep_dim != D or (self.gen.conditional and self.gen.rep_dim != D):
            raise ConfigError(
                f"stages disagree on representation dim: encoder {D}, rdm {self.rdm.rep_dim}, "
                f"generator {self.gen.rep_dim}"
            )
        if self.dataset.kind != "synthetic_mixture":
            shape = (self.dataset.image_size, self.dataset.image_size)
            if self.dataset.kind == "synthetic_shapes" and (
                    self.encoder.image_shape != shape or self.gen.image_shape != shape):
                raise ConfigError("encoder/generator image_shape must match the dataset image size")
        if self.num_samples < 0:
            raise ConfigError("num_samples must be >= 0")


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def from_dict(cls, data):
    """Build dataclass ``cls`` from a (possibly partial) nested dict."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = from_dict(hint, value)
        elif hint is tuple or typing.get_origin(hint) is tuple:
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(PipelineConfig, data)


def dump_config(cfg) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)
