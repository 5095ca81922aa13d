"""Run configuration: a YAML tree with strict keys and dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence, get_type_hints

import yaml

from .jointvae import VaeLossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    zero_terminal_snr: bool = True


@dataclass
class VaeLossConfig:
    w_x: list[float] = field(default_factory=lambda: list(VaeLossWeights.w_x))
    w_d: list[float] = field(default_factory=lambda: list(VaeLossWeights.w_d))
    w_n: float = VaeLossWeights.w_n
    w_kl: float = VaeLossWeights.w_kl
    w_distill: float = VaeLossWeights.w_distill
    gamma: float = VaeLossWeights.gamma

    def build(self) -> VaeLossWeights:
        return VaeLossWeights(
            w_x=tuple(self.w_x), w_d=tuple(self.w_d), w_n=self.w_n, w_kl=self.w_kl, w_distill=self.w_distill, gamma=self.gamma
        )


@dataclass
class VaeConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: int = 2
    downsample: int = 8
    ema_decay: float = 0.999
    modalities: list[str] = field(default_factory=lambda: ["color", "depth", "normal"])
    loss: VaeLossConfig = field(default_factory=VaeLossConfig)


@dataclass
class LdmConfig:
    widths: list[int] = field(default_factory=lambda: [32, 64])
    emb_dim: int = 64
    p_drop: float = 0.1
    guidance: float = 3.0


@dataclass
class SamplerConfig:
    text_steps: int = 100
    color_steps: int = 50


@dataclass
class InpaintConfig:
    steps: int = 50
    resample_count: int = 4
    jump_length: int = 10
    dilation: int = 1


@dataclass
class DatasetConfig:
    count: int = 32
    seed: int = 0
    height: int = 32
    width: int = 32


@dataclass
class OptimizerConfig:
    vae_lr: float = 1e-3
    ldm_lr: float = 1e-3
    vae_steps: int = 5000
    ldm_steps: int = 2000
    finetune_steps: int = 2000
    batch_size: int = 8


@dataclass
class PathsConfig:
    data: str = "data"
    vae: str = "vae.ckpt"
    ldm: str = "ldm.ckpt"
    predictor: str = "predictor.ckpt"
    predictions: str = "predictions"
    out: str = "run"


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    ldm: LdmConfig = field(default_factory=LdmConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        if self.vae.downsample != 2 ** len(self.vae.widths):
            raise ConfigError(
                f"vae.downsample={self.vae.downsample} disagrees with {len(self.vae.widths)} VAE stages "
                f"(expected {2 ** len(self.vae.widths)})"
            )
        if not 0.0 <= self.ldm.p_drop <= 1.0:
            raise ConfigError("ldm.p_drop must lie in [0, 1]")
        if len(self.ldm.widths) != 2:
            raise ConfigError("ldm.widths needs exactly two entries")
        for name in ("height", "width"):
            if getattr(self.dataset, name) % self.vae.downsample:
                raise ConfigError(f"dataset.{name} must be divisible by vae.downsample")
        if self.sampler.text_steps < 1 or self.sampler.color_steps < 1 or self.inpaint.steps < 1:
            raise ConfigError("sampler step counts must be >= 1")
        if self.inpaint.resample_count < 1 or self.inpaint.jump_length < 0 or self.inpaint.dilation < 0:
            raise ConfigError("inpaint needs resample_count >= 1, jump_length >= 0, dilation >= 0")
        if self.dataset.count < 1:
            raise ConfigError("dataset.count must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _coerce(value: Any, hint, key: str):
    origin = getattr(hint, "__origin__", None)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{key} must be a mapping")
        return _build(hint, value, key + ".")
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        (item,) = hint.__args__
        return [_coerce(v, item, f"{key}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        return str(value)
    return value


def _build(cls, data: dict, prefix: str = ""):
    hints = get_type_hints(cls)
    unknown = sorted(set(data) - set(hints))
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` into a nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    node: Any = yaml.safe_load(raw) if raw.strip() else ""
    for part in reversed(parts):
        node = {part: node}
    return node


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded or {}
    merged = _merge(RunConfig().to_dict(), data)
    for item in overrides:
        merged = _merge(merged, parse_override(item))
    return _build(RunConfig, merged).validate()


__all__ = ["ConfigError", "RunConfig", "load_config", "parse_override"]
