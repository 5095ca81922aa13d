"""Layer specifications and parameter plumbing shared by the VAE and denoiser.

Parameters live in flat ``{dotted.name: ndarray}`` dictionaries so that
optimizers, EMA shadows and checkpoints all operate on the same structure.
Networks read them through a :class:`ParamView` that prefixes names.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import functional as F
from .tensor import Tensor, silu

LAYER_KINDS = (
    "conv2d",
    "transposed-conv2d",
    "group-norm",
    "silu-activation",
    "linear",
    "sinusoidal-time-embed",
    "avg-pool",
    "nearest-upsample",
)


class ParamView:
    """Prefix-scoped read access to a flat parameter mapping."""

    def __init__(self, params: Mapping[str, Tensor], prefix: str = ""):
        self._params = params
        self._prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self._params[self._prefix + name]

    def sub(self, name: str) -> "ParamView":
        return ParamView(self._params, f"{self._prefix}{name}.")


def default_groups(channels: int) -> int:
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel_size: int = 1
    stride: int = 1
    groups: int = 1
    factor: int = 1
    dim: int = 2
    zero_init: bool = False

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        for field_name in ("in_channels", "out_channels", "kernel_size", "stride", "groups", "factor", "dim"):
            value = getattr(self, field_name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{self.kind}: {field_name} must be a positive integer, got {value!r}")
        if self.kind == "conv2d" and self.kernel_size % 2 == 0:
            raise ValueError("conv2d kernel_size must be odd so that padding preserves shape")
        if self.kind == "group-norm" and self.in_channels % self.groups:
            raise ValueError("group-norm channel count must be divisible by groups")
        if self.kind == "sinusoidal-time-embed" and self.dim % 2:
            raise ValueError("sinusoidal-time-embed dim must be even")

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    def init_params(self, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
        k, ci, co = self.kernel_size, self.in_channels, self.out_channels
        if self.kind == "conv2d":
            scale = 0.0 if self.zero_init else np.sqrt(1.0 / (ci * k * k))
            return {
                f"{prefix}.weight": rng.standard_normal((co, ci, k, k)) * scale,
                f"{prefix}.bias": np.zeros(co),
            }
        if self.kind == "transposed-conv2d":
            scale = np.sqrt(1.0 / (ci * k * k))
            return {
                f"{prefix}.weight": rng.standard_normal((ci, co, k, k)) * scale,
                f"{prefix}.bias": np.zeros(co),
            }
        if self.kind == "group-norm":
            return {f"{prefix}.gamma": np.ones(ci), f"{prefix}.beta": np.zeros(ci)}
        if self.kind == "linear":
            scale = 0.0 if self.zero_init else np.sqrt(1.0 / ci)
            return {
                f"{prefix}.weight": rng.standard_normal((co, ci)) * scale,
                f"{prefix}.bias": np.zeros(co),
            }
        return {}

    def __call__(self, p: ParamView, x):
        if self.kind == "conv2d":
            return F.conv2d(x, p["weight"], p["bias"], stride=self.stride, padding=self.padding)
        if self.kind == "transposed-conv2d":
            return F.conv_transpose2d(x, p["weight"], p["bias"], stride=self.stride, padding=self.padding)
        if self.kind == "group-norm":
            return F.group_norm(x, p["gamma"], p["beta"], self.groups)
        if self.kind == "silu-activation":
            return silu(x)
        if self.kind == "linear":
            return F.linear(x, p["weight"], p["bias"])
        if self.kind == "avg-pool":
            return F.avg_pool2d(x, self.factor)
        if self.kind == "nearest-upsample":
            return F.upsample_nearest2d(x, self.factor)
        raise ValueError("sinusoidal-time-embed is parameter-free; call functional.sinusoidal_time_embed")


def conv(ci: int, co: int, k: int = 3, stride: int = 1, zero_init: bool = False) -> LayerSpec:
    return LayerSpec("conv2d", in_channels=ci, out_channels=co, kernel_size=k, stride=stride, zero_init=zero_init)


def norm(c: int) -> LayerSpec:
    return LayerSpec("group-norm", in_channels=c, out_channels=c, groups=default_groups(c))


def dense(ci: int, co: int, zero_init: bool = False) -> LayerSpec:
    return LayerSpec("linear", in_channels=ci, out_channels=co, zero_init=zero_init)


def to_tensors(arrays: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {name: Tensor(a, requires_grad=requires_grad, name=name) for name, a in arrays.items()}


@dataclass(frozen=True)
class ResBlock:
    """Pre-activation residual block, optionally modulated by an embedding vector.

    With ``emb_dim`` set, a linear projection of the embedding is added as a
    per-channel bias after the first convolution.
    """

    in_channels: int
    out_channels: int
    emb_dim: int | None = None

    def layers(self) -> dict[str, LayerSpec]:
        ci, co = self.in_channels, self.out_channels
        out = {"norm1": norm(ci), "conv1": conv(ci, co), "norm2": norm(co), "conv2": conv(co, co, zero_init=True)}
        if self.emb_dim:
            out["emb"] = dense(self.emb_dim, co)
        if ci != co:
            out["skip"] = conv(ci, co, k=1)
        return out

    def init_params(self, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for name, spec in self.layers().items():
            params.update(spec.init_params(rng, f"{prefix}.{name}"))
        return params

    def __call__(self, p: ParamView, x, emb=None):
        from .tensor import add, reshape

        specs = self.layers()
        h = specs["conv1"](p.sub("conv1"), silu(specs["norm1"](p.sub("norm1"), x)))
        if self.emb_dim:
            if emb is None:
                raise ValueError("ResBlock built with emb_dim needs an embedding")
            e = specs["emb"](p.sub("emb"), silu(emb))
            h = add(h, reshape(e, e.shape + (1, 1)))
        h = specs["conv2"](p.sub("conv2"), silu(specs["norm2"](p.sub("norm2"), h)))
        skip = specs["skip"](p.sub("skip"), x) if "skip" in specs else x
        return add(skip, h)
