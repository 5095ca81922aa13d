"""Joint color-depth-normal variational autoencoder.

Seven input channels (RGB, preprocessed inverse depth, unit normal) are
encoded to an 8-channel latent at 1/8 resolution. The decoder mirrors the
encoder and ends in per-modality heads: sigmoid color, softplus depth and
unit-normalized normals. A small patch discriminator supplies the
adversarial terms.

Parameters live in one flat dictionary whose names start with ``enc.``,
``dec.`` or ``disc.``; the update of each group follows its own objective
(see :func:`vae_train_step`).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import NormalMap, preprocess_depth
from .ndcore import Adam, AutodiffError, ParamView, Tape, Tensor, backward, ema_update, global_norm, no_record
from .ndcore import functional as F
from .ndcore.checkpoint import load_params, save_params
from .ndcore.layers import ResBlock, conv, norm, to_tensors
from .ndcore.tensor import absolute, clip, concat, exp, mean, power, relu, sigmoid, silu, softplus, sqrt, tsum
from .utils.validation import check_array, check_divisible, check_samples, check_unit_range, check_weight

log = logging.getLogger(__name__)

INPUT_CHANNELS = 7
LATENT_CHANNELS = 8
LOG_VAR_RANGE = (-30.0, 20.0)
MODALITIES = ("color", "depth", "normal")
GROUPS = ("enc", "dec", "disc")
_NORM_EPS = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class VaeLossWeights:
    """Loss weights; ``w_x`` is (rec, adv, perceptual, local-disc), ``w_d`` is (rec, gradient)."""

    w_x: tuple[float, float, float, float] = (1.0, 0.1, 0.1, 1.0)
    w_d: tuple[float, float] = (1.0, 0.5)
    w_n: float = 1.0
    w_kl: float = 1e-3
    w_distill: float = 1e-6
    gamma: float = 0.1
    perceptual_channels: tuple[int, ...] = (8, 16, 16)
    perceptual_seed: int = 1234
    local_window: int = 7

    def __post_init__(self):
        object.__setattr__(self, "w_x", tuple(float(w) for w in self.w_x))
        object.__setattr__(self, "w_d", tuple(float(w) for w in self.w_d))
        object.__setattr__(self, "perceptual_channels", tuple(int(c) for c in self.perceptual_channels))
        if len(self.w_x) != 4 or len(self.w_d) != 2:
            raise ValueError("w_x needs 4 entries and w_d needs 2")
        for i, w in enumerate(self.w_x):
            check_weight(w, f"w_x[{i}]")
        for i, w in enumerate(self.w_d):
            check_weight(w, f"w_d[{i}]")
        for name in ("w_n", "w_kl", "w_distill", "gamma"):
            check_weight(getattr(self, name), name)
        if self.local_window < 1 or self.local_window % 2 == 0:
            raise ValueError("local_window must be a positive odd integer")

    @classmethod
    def zeros(cls) -> "VaeLossWeights":
        return cls(w_x=(0, 0, 0, 0), w_d=(0, 0), w_n=0, w_kl=0, w_distill=0, gamma=0)

    def for_modalities(self, modalities: Sequence[str]) -> "VaeLossWeights":
        w = self
        if "depth" not in modalities:
            w = replace(w, w_d=(0.0, 0.0))
        if "normal" not in modalities:
            w = replace(w, w_n=0.0)
        return w


@dataclass
class VaeBatch:
    """Coupled training tensors, all [N,C,H,W]; ``valid`` marks pixels with geometry."""

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.color = check_unit_range(check_array(self.color, 4, "color"))
        self.depth = check_array(self.depth, 4, "depth")
        self.normal = check_array(self.normal, 4, "normal")
        self.valid = check_array(self.valid, 4, "valid")
        n, _, h, w = self.color.shape
        expected = {"color": 3, "depth": 1, "normal": 3, "valid": 1}
        for name, channels in expected.items():
            if getattr(self, name).shape != (n, channels, h, w):
                raise ValueError(f"{name} must be [{n},{channels},{h},{w}], got {getattr(self, name).shape}")

    def __len__(self) -> int:
        return len(self.color)

    @property
    def spatial(self) -> tuple[int, int]:
        return self.color.shape[2:]

    def subset(self, index) -> "VaeBatch":
        return VaeBatch(self.color[index], self.depth[index], self.normal[index], self.valid[index])

    @classmethod
    def from_samples(cls, samples) -> "VaeBatch":
        samples = check_samples(samples)
        color = np.stack([s.color for s in samples])
        depth, normal, valid = [], [], []
        for s in samples:
            d = preprocess_depth(s.depth)
            depth.append(d.values[None])
            mask = s.normal.valid & s.depth.valid
            normal.append(np.where(mask[None], s.normal.vectors, 0.0))
            valid.append(mask[None].astype(np.float64))
        return cls(color, np.stack(depth), np.stack(normal), np.stack(valid))

    @classmethod
    def from_color(cls, color: np.ndarray) -> "VaeBatch":
        """Color-only batch with depth and normal channels zeroed."""
        color = check_array(color, (3, 4), "color")
        if color.ndim == 3:
            color = color[None]
        n, _, h, w = color.shape
        zeros = np.zeros((n, 1, h, w))
        return cls(color, zeros, np.zeros((n, 3, h, w)), zeros.copy())


@dataclass
class LatentDistribution:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)


@dataclass(frozen=True)
class VaeArchitecture:
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: int = 2
    latent_channels: int = LATENT_CHANNELS
    disc_widths: tuple[int, int] = (16, 32)
    modalities: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "disc_widths", tuple(int(w) for w in self.disc_widths))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty tuple of positive integers")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown or "color" not in self.modalities:
            raise ValueError(f"modalities must include 'color' and come from {MODALITIES}")

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)

    # -- module tables -------------------------------------------------------
    def encoder_modules(self) -> dict:
        w = self.widths
        mods = {"conv_in": conv(INPUT_CHANNELS, w[0])}
        ch = w[0]
        for i, width in enumerate(w):
            mods[f"down{i}"] = conv(ch, width, stride=2)
            ch = width
            for j in range(self.blocks):
                mods[f"stage{i}.block{j}"] = ResBlock(ch, ch)
        mods["norm_out"] = norm(ch)
        mods["conv_out"] = conv(ch, 2 * self.latent_channels)
        return mods

    def decoder_modules(self) -> dict:
        w = self.widths[::-1]
        mods = {"conv_in": conv(self.latent_channels, w[0])}
        ch = w[0]
        for i in range(len(w)):
            for j in range(self.blocks):
                mods[f"stage{i}.block{j}"] = ResBlock(ch, ch)
            nxt = w[i + 1] if i + 1 < len(w) else w[-1]
            mods[f"up{i}"] = conv(ch, nxt)
            ch = nxt
        mods["norm_out"] = norm(ch)
        mods["conv_out"] = conv(ch, INPUT_CHANNELS)
        return mods

    def discriminator_modules(self) -> dict:
        d0, d1 = self.disc_widths
        return {"conv0": conv(3, d0, stride=2), "conv1": conv(d0, d1, stride=2), "norm1": norm(d1), "head": conv(d1, 1)}

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for group, mods in (
            ("enc", self.encoder_modules()),
            ("dec", self.decoder_modules()),
            ("disc", self.discriminator_modules()),
        ):
            for name, mod in mods.items():
                params.update(mod.init_params(rng, f"{group}.{name}"))
        # the depth/normal input channels start at zero, as when extending a color-only encoder
        params["enc.conv_in.weight"][:, 3:] = 0.0
        return params


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


def encoder_forward(arch: VaeArchitecture, p: ParamView, x) -> tuple[Tensor, Tensor]:
    """Latent moments (mu, clamped log-variance) of a 7-channel input."""
    mods = arch.encoder_modules()
    h = mods["conv_in"](p.sub("conv_in"), x)
    for i in range(len(arch.widths)):
        h = mods[f"down{i}"](p.sub(f"down{i}"), h)
        for j in range(arch.blocks):
            h = mods[f"stage{i}.block{j}"](p.sub(f"stage{i}.block{j}"), h)
    h = silu(mods["norm_out"](p.sub("norm_out"), h))
    moments = mods["conv_out"](p.sub("conv_out"), h)
    c = arch.latent_channels
    return moments[:, :c], clip(moments[:, c:], *LOG_VAR_RANGE)


def decoder_forward(arch: VaeArchitecture, p: ParamView, z) -> tuple[Tensor, Tensor, Tensor]:
    """(color in [0,1], depth >= 0, unit normals) from a latent."""
    mods = arch.decoder_modules()
    h = mods["conv_in"](p.sub("conv_in"), z)
    for i in range(len(arch.widths)):
        for j in range(arch.blocks):
            h = mods[f"stage{i}.block{j}"](p.sub(f"stage{i}.block{j}"), h)
        h = mods[f"up{i}"](p.sub(f"up{i}"), F.upsample_nearest2d(h, 2))
    h = silu(mods["norm_out"](p.sub("norm_out"), h))
    out = mods["conv_out"](p.sub("conv_out"), h)
    raw = out[:, 4:7]
    length = sqrt(tsum(raw * raw, axis=1, keepdims=True) + 1e-12)
    return sigmoid(out[:, :3]), softplus(out[:, 3:4]), raw / length


def discriminator_forward(arch: VaeArchitecture, p: ParamView, color) -> Tensor:
    """Patch logits [N,1,H/4,W/4]."""
    mods = arch.discriminator_modules()
    h = silu(mods["conv0"](p.sub("conv0"), color * 2.0 - 1.0))
    h = silu(mods["norm1"](p.sub("norm1"), mods["conv1"](p.sub("conv1"), h)))
    return mods["head"](p.sub("head"), h)


def assemble_input(batch: VaeBatch, modalities: Sequence[str] = MODALITIES) -> np.ndarray:
    depth = batch.depth if "depth" in modalities else np.zeros_like(batch.depth)
    normal = batch.normal if "normal" in modalities else np.zeros_like(batch.normal)
    return np.concatenate([batch.color, depth, normal], axis=1)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def pixel_l2(diff, mask=None) -> Tensor:
    """Mean over pixels of the channel L2 norm; smooth at zero and exactly 0 there."""
    sq = tsum(diff * diff, axis=1, keepdims=True)
    dist = sqrt(sq + _NORM_EPS**2) - _NORM_EPS
    if mask is None:
        return mean(dist)
    mask = np.asarray(mask)
    return tsum(dist * mask) / max(float(mask.sum()), 1.0)


def kl_divergence(mu, log_var) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), averaged per latent element."""
    return mean(mu * mu + exp(log_var) - log_var - 1.0) * 0.5


def depth_gradient_loss(pred, target, scales: int = 4) -> Tensor:
    """Mean |grad_x R| + |grad_y R| of R = pred - target, averaged over dyadic scales."""
    r = pred - target
    total, used = None, 0
    for s in range(scales):
        if s:
            if min(r.shape[-2:]) < 4:
                break  # too coarse for another level
            r = F.avg_pool2d(r, 2)
        term = mean(absolute(r[:, :, :, 1:] - r[:, :, :, :-1])) + mean(absolute(r[:, :, 1:, :] - r[:, :, :-1, :]))
        total = term if total is None else total + term
        used += 1
    return total / used


def local_disc_loss(pred, target, window: int = 7) -> Tensor:
    """Residual-variance-weighted L1.

    The per-pixel weight is the local variance of the channel-mean residual
    (``window`` box) times the fifth root of its per-image global variance,
    which emphasizes pixels inside busy, artifact-prone residual patches.
    """
    r = absolute(pred - target)
    rm = mean(r, axis=1, keepdims=True)
    local = relu(F.box_filter(rm * rm, window) - power(F.box_filter(rm, window), 2.0))
    centered = rm - mean(rm, axis=(1, 2, 3), keepdims=True)
    global_var = mean(centered * centered, axis=(1, 2, 3), keepdims=True)
    weight = power(global_var + 1e-12, 0.2) * local
    return mean(weight * r)


class PerceptualFeatures:
    """Frozen random conv pyramid used as the perceptual feature space."""

    def __init__(self, channels: Sequence[int] = (8, 16, 16), seed: int = 1234):
        rng = np.random.default_rng(seed)
        self.weights = []
        ci = 3
        for co in channels:
            self.weights.append(rng.standard_normal((co, ci, 3, 3)) * np.sqrt(2.0 / (ci * 9)))
            ci = co

    def __call__(self, color) -> list[Tensor]:
        feats = []
        h = color * 2.0 - 1.0
        for i, w in enumerate(self.weights):
            if i:
                h = F.avg_pool2d(h, 2)
            h = relu(F.conv2d(h, w, padding=1))
            feats.append(h)
        return feats


_PERCEPTUAL_CACHE: dict[tuple, PerceptualFeatures] = {}


def perceptual_extractor(weights: VaeLossWeights) -> PerceptualFeatures:
    key = (weights.perceptual_channels, weights.perceptual_seed)
    if key not in _PERCEPTUAL_CACHE:
        _PERCEPTUAL_CACHE[key] = PerceptualFeatures(*key)
    return _PERCEPTUAL_CACHE[key]


def perceptual_loss(pred, target, extractor: PerceptualFeatures) -> Tensor:
    with no_record():
        target_feats = [f.data for f in extractor(target)]
    terms = [pixel_l2(f - t) for f, t in zip(extractor(pred), target_feats)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def generator_adversarial(logits) -> Tensor:
    """Non-saturating generator objective -log sigmoid(D(x_hat))."""
    return mean(softplus(-logits))


def discriminator_loss(real_logits, fake_logits) -> Tensor:
    """-log sigmoid(D(x)) - log(1 - sigmoid(D(x_hat)))."""
    return mean(softplus(-real_logits)) + mean(softplus(fake_logits))


# ---------------------------------------------------------------------------
# parameters and losses
# ---------------------------------------------------------------------------


@dataclass
class JointVaeParams:
    """Trainable weights, EMA shadows and the frozen encoder snapshot."""

    arch: VaeArchitecture
    theta: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    enc_star: dict[str, np.ndarray]

    @classmethod
    def initialize(cls, arch: VaeArchitecture, rng: np.random.Generator) -> "JointVaeParams":
        theta = arch.init_params(rng)
        ema = {k: v.copy() for k, v in theta.items() if not k.startswith("disc.")}
        enc_star = {k: v.copy() for k, v in theta.items() if k.startswith("enc.")}
        for v in enc_star.values():
            v.setflags(write=False)
        return cls(arch, theta, ema, enc_star)

    def group(self, name: str, source: str = "theta") -> dict[str, np.ndarray]:
        table = getattr(self, source)
        return {k: v for k, v in table.items() if k.startswith(name + ".")}

    def weights(self, use_ema: bool = True) -> dict[str, np.ndarray]:
        """Encoder and decoder weights used for inference."""
        return dict(self.ema) if use_ema else {k: v for k, v in self.theta.items() if not k.startswith("disc.")}

    def flat(self) -> dict[str, np.ndarray]:
        out = {f"theta.{k}": v for k, v in self.theta.items()}
        out.update({f"ema.{k}": v for k, v in self.ema.items()})
        out.update({f"star.{k}": v for k, v in self.enc_star.items()})
        return out

    @classmethod
    def from_flat(cls, arch: VaeArchitecture, flat: dict[str, np.ndarray]) -> "JointVaeParams":
        pick = lambda prefix: {k[len(prefix) :]: v for k, v in flat.items() if k.startswith(prefix)}  # noqa: E731
        star = pick("star.")
        for v in star.values():
            v.setflags(write=False)
        return cls(arch, pick("theta."), pick("ema."), star)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name, value in sorted(self.flat().items()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()


def _loss_graph(batch: VaeBatch, params: JointVaeParams, tensors: dict, weights: VaeLossWeights, rng) -> dict:
    """Forward pass for the generator objectives on an active tape."""
    arch = params.arch
    weights = weights.for_modalities(arch.modalities)
    x_in = assemble_input(batch, arch.modalities)
    mu, log_var = encoder_forward(arch, ParamView(tensors, "enc."), x_in)
    xi = rng.standard_normal(mu.shape)
    z = mu + exp(log_var * 0.5) * xi
    color, depth, normal = decoder_forward(arch, ParamView(tensors, "dec."), z)
    terms = {
        "rec": pixel_l2(color - batch.color),
        "perceptual": perceptual_loss(color, batch.color, perceptual_extractor(weights)),
        "local_disc": local_disc_loss(color, batch.color, weights.local_window),
        "depth_rec": mean(absolute(depth - batch.depth)),
        "depth_grad": depth_gradient_loss(depth, batch.depth),
        "normal_rec": pixel_l2(normal - batch.normal, batch.valid),
        "kl": kl_divergence(mu, log_var),
    }
    logits = discriminator_forward(arch, ParamView(tensors, "disc."), color)
    terms["adv"] = generator_adversarial(logits)
    if weights.w_distill > 0:
        with no_record():
            star = to_tensors(params.enc_star)
            mu_star = encoder_forward(arch, ParamView(star, "enc."), x_in)[0].data
        terms["distill"] = mean(absolute(mu - mu_star))
    else:
        terms["distill"] = mean(absolute(mu - mu.data))
    w1, w2, w3, w4 = weights.w_x
    out = {
        "L_x": terms["rec"] * w1 + terms["adv"] * w2 + terms["perceptual"] * w3 + terms["local_disc"] * w4,
        "L_d": terms["depth_rec"] * weights.w_d[0] + terms["depth_grad"] * weights.w_d[1],
        "L_n": terms["normal_rec"] * weights.w_n,
        "L_KL": terms["kl"] * weights.w_kl,
        "L_distill": terms["distill"] * weights.w_distill,
        "L_gamma": terms["adv"] * weights.gamma,
    }
    out.update(terms)
    out["_color"] = color
    return out


def _disc_graph(batch: VaeBatch, params_view: ParamView, arch: VaeArchitecture, fake: np.ndarray) -> Tensor:
    real = discriminator_forward(arch, params_view, batch.color)
    return discriminator_loss(real, discriminator_forward(arch, params_view, fake))


def vae_losses(batch: VaeBatch, params: JointVaeParams, weights: VaeLossWeights, rng) -> dict[str, float]:
    """Named scalar losses (weighted L_x, L_d, L_n, L_KL, L_distill, L_disc plus raw terms)."""
    rng = np.random.default_rng(rng)
    tensors = to_tensors(params.theta)
    graph = _loss_graph(batch, params, tensors, weights, rng)
    graph["L_disc"] = _disc_graph(batch, ParamView(tensors, "disc."), params.arch, graph["_color"].data)
    report = {k: float(v.data) for k, v in graph.items() if not k.startswith("_")}
    for name, value in report.items():
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {name}")
    return report


@dataclass
class VaeTrainState:
    params: JointVaeParams
    optimizer: Adam = field(default_factory=Adam)
    ema_decay: float = 0.999
    step: int = 0
    rejected: int = 0


def vae_train_step(batch: VaeBatch, state: VaeTrainState, weights: VaeLossWeights, rng) -> dict[str, float]:
    """One update with the three-way gradient split.

    encoder:       L_x + L_d + L_n + L_KL + L_distill
    decoder:       L_x + L_d + L_n + gamma * (non-saturating adversarial term)
    discriminator: L_disc on detached reconstructions
    """
    rng = np.random.default_rng(rng)
    params = state.params
    arch = params.arch
    start = time.perf_counter()
    tensors = to_tensors(params.theta)
    enc = [t for k, t in tensors.items() if k.startswith("enc.")]
    dec = [t for k, t in tensors.items() if k.startswith("dec.")]
    disc = [t for k, t in tensors.items() if k.startswith("disc.")]
    for t in enc + dec:
        t.requires_grad = True
    with Tape() as tape:
        graph = _loss_graph(batch, params, tensors, weights, rng)
        main = graph["L_x"] + graph["L_d"] + graph["L_n"]
        enc_objective = main + graph["L_KL"] + graph["L_distill"]
    fake = graph["_color"].data
    for t in disc:
        t.requires_grad = True
    with Tape() as disc_tape:
        l_disc = _disc_graph(batch, ParamView(tensors, "disc."), arch, fake)
    report = {k: float(v.data) for k, v in graph.items() if not k.startswith("_")}
    report["L_disc"] = float(l_disc.data)
    for name in ("L_x", "L_d", "L_n", "L_KL", "L_distill", "L_gamma", "L_disc"):
        if not np.isfinite(report[name]):
            raise TrainingError(f"non-finite loss {name} at step {state.step}")
    try:
        g_main = backward(enc_objective, tape, sources=enc + dec)
        g_gamma = backward(graph["L_gamma"], tape, sources=dec) if weights.gamma > 0 else {}
        g_disc = backward(l_disc, disc_tape, sources=disc)
    except AutodiffError as err:
        state.rejected += 1
        log.warning("step %d rejected: %s", state.step, err)
        return {**report, "rejected": 1.0}
    grads = {t.name: g_main[t] for t in enc}
    grads.update({t.name: g_main[t] + g_gamma[t] if t in g_gamma else g_main[t] for t in dec})
    grads.update({t.name: g_disc[t] for t in disc})
    state.optimizer.step(params.theta, grads)
    ema_update(params.ema, {k: v for k, v in params.theta.items() if k in params.ema}, state.ema_decay)
    state.step += 1
    report.update(
        step=state.step,
        grad_norm=global_norm({k: v for k, v in grads.items() if not k.startswith("disc.")}),
        wall_time=time.perf_counter() - start,
        rejected=0.0,
    )
    report["total"] = report["L_x"] + report["L_d"] + report["L_n"] + report["L_KL"] + report["L_distill"]
    return report


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def encode_moments(params: JointVaeParams, x_in: np.ndarray, use_ema: bool = True, chunk: int = 16):
    arch = params.arch
    tensors = to_tensors(params.weights(use_ema))
    mus, lvs = [], []
    for i in range(0, len(x_in), chunk):
        mu, lv = encoder_forward(arch, ParamView(tensors, "enc."), x_in[i : i + chunk])
        mus.append(mu.data)
        lvs.append(lv.data)
    return LatentDistribution(np.concatenate(mus), np.concatenate(lvs))


def decode_latents(params: JointVaeParams, z: np.ndarray, use_ema: bool = True, chunk: int = 16):
    arch = params.arch
    z = check_array(z, 4, "latent")
    if z.shape[1] != arch.latent_channels:
        raise ValueError(f"latent has {z.shape[1]} channels, decoder expects {arch.latent_channels}")
    tensors = to_tensors(params.weights(use_ema))
    parts = [decoder_forward(arch, ParamView(tensors, "dec."), z[i : i + chunk]) for i in range(0, len(z), chunk)]
    color, depth, normal = (np.concatenate([p[k].data for p in parts]) for k in range(3))
    return color, depth, normal


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((pred - target) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def angular_error_deg(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    dots = np.clip(np.sum(pred * target, axis=1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots))[mask[:, 0] > 0].mean())


class JointVAE(TransformerMixin, BaseEstimator):
    """Joint color/depth/normal VAE with a scikit-learn style interface.

    ``fit`` trains on synthdata samples (or a :class:`VaeBatch`), ``transform``
    returns latent means and ``inverse_transform`` decodes latents back to a
    :class:`VaeBatch`.
    """

    def __init__(
        self,
        widths=(16, 32, 64),
        blocks=2,
        latent_channels=LATENT_CHANNELS,
        modalities=MODALITIES,
        weights=None,
        ema_decay=0.999,
        learning_rate=1e-3,
        lr_schedule="constant",
        n_steps=1000,
        batch_size=8,
        use_ema=True,
        log_path=None,
        log_every=50,
        random_state=0,
    ):
        self.widths = widths
        self.blocks = blocks
        self.latent_channels = latent_channels
        self.modalities = modalities
        self.weights = weights
        self.ema_decay = ema_decay
        self.learning_rate = learning_rate
        self.lr_schedule = lr_schedule
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.use_ema = use_ema
        self.log_path = log_path
        self.log_every = log_every
        self.random_state = random_state

    # -- training ------------------------------------------------------------
    def _architecture(self) -> VaeArchitecture:
        return VaeArchitecture(
            widths=tuple(self.widths),
            blocks=self.blocks,
            latent_channels=self.latent_channels,
            modalities=tuple(self.modalities),
        )

    def _as_batch(self, X) -> VaeBatch:
        batch = X if isinstance(X, VaeBatch) else VaeBatch.from_samples(X)
        check_divisible(*batch.spatial, self._architecture().downsample)
        return batch

    def fit(self, X, y=None):
        batch = self._as_batch(X)
        rng = np.random.default_rng(self.random_state)
        arch = self._architecture()
        self.state_ = VaeTrainState(
            JointVaeParams.initialize(arch, rng), Adam(lr=self.learning_rate), ema_decay=self.ema_decay
        )
        self.history_ = []
        self._rng = rng
        return self.partial_fit(batch, n_steps=self.n_steps)

    def _lr(self, step: int) -> float:
        """Learning rate for ``step``; the cosine horizon is ``n_steps``."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        if self.lr_schedule == "cosine":
            frac = min(step / max(self.n_steps, 1), 1.0)
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))
        raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def partial_fit(self, X, y=None, n_steps: int | None = None):
        if not hasattr(self, "state_"):
            return self.fit(X) if n_steps is None else self.set_params(n_steps=n_steps).fit(X)
        batch = self._as_batch(X)
        weights = self.weights or VaeLossWeights()
        rng = self._rng
        n_steps = self.n_steps if n_steps is None else n_steps
        log_file = open(self.log_path, "a") if self.log_path else None
        try:
            for _ in range(n_steps):
                size = min(self.batch_size, len(batch))
                idx = np.sort(rng.choice(len(batch), size=size, replace=False))
                self.state_.optimizer.lr = self._lr(self.state_.step)
                report = vae_train_step(batch.subset(idx), self.state_, weights, rng)
                self.history_.append(report)
                if log_file and (self.state_.step % self.log_every == 0 or self.state_.step == 1):
                    log_file.write(json.dumps(report) + "\n")
                if self.state_.step % self.log_every == 0:
                    log.info("vae step %d total %.5f", self.state_.step, report["total"])
        finally:
            if log_file:
                log_file.close()
        return self

    @property
    def params_(self) -> JointVaeParams:
        check_is_fitted(self, "state_")
        return self.state_.params

    @property
    def downsample(self) -> int:
        return self._architecture().downsample

    # -- inference -----------------------------------------------------------
    def transform(self, X) -> np.ndarray:
        """Latent means of the full (color, depth, normal) input."""
        batch = self._as_batch(X)
        return encode_moments(self.params_, assemble_input(batch, self.modalities), self.use_ema).mu

    def encode_color(self, color) -> np.ndarray:
        """Latent means of color alone (depth and normal inputs zeroed)."""
        batch = VaeBatch.from_color(color)
        check_divisible(*batch.spatial, self.downsample)
        return encode_moments(self.params_, assemble_input(batch), self.use_ema).mu

    def inverse_transform(self, Z) -> VaeBatch:
        color, depth, normal = decode_latents(self.params_, Z, self.use_ema)
        return VaeBatch(color, depth, normal, np.ones_like(depth))

    def encode_sample(self, x, d_model, n: NormalMap, rng=None):
        """(LatentDistribution, reparametrized sample) for one coupled input."""
        x = check_unit_range(check_array(x, 3, "color"))
        valid = n.valid & d_model.valid
        batch = VaeBatch(
            x[None],
            d_model.values[None, None],
            np.where(valid, n.vectors, 0.0)[None],
            valid[None, None].astype(np.float64),
        )
        check_divisible(*batch.spatial, self.downsample)
        dist = encode_moments(self.params_, assemble_input(batch, self.modalities), self.use_ema)
        xi = np.random.default_rng(rng).standard_normal(dist.mu.shape)
        z = dist.mu + dist.std * xi
        return LatentDistribution(dist.mu[0], dist.log_var[0]), z[0]

    def decode(self, z):
        """(color [3,H,W], model depth [H,W], NormalMap) for one latent."""
        z = check_array(z, 3, "latent")
        color, depth, normal = decode_latents(self.params_, z[None], self.use_ema)
        return color[0], depth[0, 0], NormalMap(normal[0])

    def reconstruction_report(self, X) -> dict[str, float]:
        """Color PSNR, model-depth MAE and normal angular error of decode(encode(X))."""
        batch = self._as_batch(X)
        out = self.inverse_transform(self.transform(batch))
        mask = batch.valid > 0
        return {
            "psnr": psnr(out.color, batch.color),
            "depth_mae": float(np.abs(out.depth - batch.depth)[mask].mean()),
            "normal_deg": angular_error_deg(out.normal, batch.normal, batch.valid),
        }

    def score(self, X, y=None) -> float:
        return self.reconstruction_report(X)["psnr"]

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_params(path, self.params_.flat())
        meta = {k: v for k, v in self.get_params().items() if k not in ("weights", "log_path")}
        meta["weights"] = asdict(self.weights or VaeLossWeights())
        meta["step"] = self.state_.step
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "JointVAE":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        step = meta.pop("step", 0)
        weights = VaeLossWeights(**meta.pop("weights"))
        known = {f for f in cls().get_params()}
        model = cls(weights=weights, **{k: v for k, v in meta.items() if k in known})
        params = JointVaeParams.from_flat(model._architecture(), load_params(path))
        model.state_ = VaeTrainState(params, Adam(lr=model.learning_rate), ema_decay=model.ema_decay, step=step)
        model.history_ = []
        model._rng = np.random.default_rng(model.random_state)
        return model


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


__all__ = [
    "JointVAE",
    "JointVaeParams",
    "LatentDistribution",
    "TrainingError",
    "VaeArchitecture",
    "VaeBatch",
    "VaeLossWeights",
    "VaeTrainState",
    "decode_latents",
    "encode_moments",
    "vae_losses",
    "vae_train_step",
]
