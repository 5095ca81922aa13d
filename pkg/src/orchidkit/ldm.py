"""Latent denoiser, its training step, and the two sampling regimes.

The denoiser predicts the velocity ``v`` of an 8-channel joint latent. It is
conditioned either on scene tags (an embedding table with a dedicated null
row, trained with condition dropout so that classifier-free guidance works)
or on the clean color-only latent of the same image, concatenated along the
channel axis.

Latents are multiplied by ``latent_scale_ = 1 / std(mu)`` before diffusion and
divided by it before decoding.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import Intrinsics, MetricDepth, ModelDepth, NormalMap
from .jointvae import LATENT_CHANNELS, JointVAE, VaeBatch
from .ndcore import Adam, AutodiffError, ParamView, Tape, Tensor, backward, global_norm, no_record
from .ndcore import functional as F
from .ndcore.checkpoint import load_params, save_params
from .ndcore.layers import ResBlock, conv, dense, norm, to_tensors
from .ndcore.tensor import add, concat, matmul, mean, reshape, silu, softmax, transpose
from .schedule import NoiseSchedule, build_schedule, ddim_step, ddim_timesteps, ddpm_step, forward_noise, respace, velocity
from .synthdata import VOCABULARY, Sample
from .utils.validation import check_array, check_divisible, check_samples, check_weight

log = logging.getLogger(__name__)

CONDITION_KINDS = ("none", "tags", "color_latent")
TEXT_STEPS = 100
COLOR_STEPS = 50


class ConditionError(ValueError):
    pass


@dataclass(frozen=True)
class Condition:
    kind: str = "none"
    tags: tuple[str, ...] = ()
    color_latent: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ConditionError(f"condition kind must be one of {CONDITION_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "tags", tuple(self.tags))
        if self.kind == "color_latent":
            if self.color_latent is None:
                raise ConditionError("color_latent condition needs a latent")
            lat = np.asarray(self.color_latent, dtype=np.float64)
            if lat.ndim != 3 or lat.shape[0] != LATENT_CHANNELS:
                raise ConditionError(f"color latent must be [{LATENT_CHANNELS},h,w], got {lat.shape}")
            object.__setattr__(self, "color_latent", lat)

    @classmethod
    def from_tags(cls, tags: Sequence[str]) -> "Condition":
        return cls("tags", tuple(tags))


def tag_weights(conds: Sequence[Condition], vocabulary: Sequence[str]) -> np.ndarray:
    """Rows of mixing weights over the embedding table; the last column is the null row.

    Several tags are averaged. ``none`` and empty tag lists route to the null row.
    """
    index = {tok: i for i, tok in enumerate(vocabulary)}
    out = np.zeros((len(conds), len(vocabulary) + 1))
    for row, cond in enumerate(conds):
        tags = cond.tags if cond.kind == "tags" else ()
        unknown = [t for t in tags if t not in index]
        if unknown:
            raise ConditionError(f"unknown tag(s) {unknown}; vocabulary is {list(vocabulary)}")
        if not tags:
            out[row, -1] = 1.0
            continue
        for t in tags:
            out[row, index[t]] += 1.0 / len(tags)
    return out


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelfAttention:
    """Single-head spatial self-attention with a zero-initialized output projection."""

    channels: int

    def layers(self) -> dict:
        c = self.channels
        return {"norm": norm(c), "qkv": conv(c, 3 * c, k=1), "proj": conv(c, c, k=1, zero_init=True)}

    def init_params(self, rng, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name, spec in self.layers().items():
            out.update(spec.init_params(rng, f"{prefix}.{name}"))
        return out

    def __call__(self, p: ParamView, x):
        specs = self.layers()
        n, c, h, w = x.shape
        qkv = reshape(specs["qkv"](p.sub("qkv"), specs["norm"](p.sub("norm"), x)), (n, 3, c, h * w))
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        attn = softmax(matmul(transpose(q, (0, 2, 1)), k) * (1.0 / np.sqrt(c)), axis=-1)
        out = matmul(v, transpose(attn, (0, 2, 1)))
        return add(x, specs["proj"](p.sub("proj"), reshape(out, (n, c, h, w))))


@dataclass(frozen=True)
class DenoiserArchitecture:
    """Two-resolution UNet over latents; ``in_channels`` is 8 (tags) or 16 (color latent)."""

    in_channels: int = LATENT_CHANNELS
    widths: tuple[int, int] = (32, 64)
    time_dim: int = 32
    emb_dim: int = 64
    vocabulary: tuple[str, ...] = VOCABULARY
    T: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        if len(self.widths) != 2:
            raise ValueError("the denoiser has exactly two resolutions")
        if self.in_channels not in (LATENT_CHANNELS, 2 * LATENT_CHANNELS):
            raise ValueError(f"in_channels must be {LATENT_CHANNELS} or {2 * LATENT_CHANNELS}")

    @property
    def color_conditioned(self) -> bool:
        return self.in_channels == 2 * LATENT_CHANNELS

    def modules(self) -> dict:
        w0, w1, e = self.widths[0], self.widths[1], self.emb_dim
        return {
            "time1": dense(self.time_dim, e),
            "time2": dense(e, e),
            "conv_in": conv(self.in_channels, w0),
            "enc0": ResBlock(w0, w0, e),
            "down": conv(w0, w0, stride=2),
            "enc1": ResBlock(w0, w1, e),
            "attn": SelfAttention(w1),
            "mid": ResBlock(w1, w1, e),
            "up": conv(w1, w0),
            "dec0": ResBlock(2 * w0, w0, e),
            "norm_out": norm(w0),
            "conv_out": conv(w0, LATENT_CHANNELS, zero_init=True),
        }

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, mod in self.modules().items():
            params.update(mod.init_params(rng, name))
        params["cond.table"] = rng.standard_normal((len(self.vocabulary) + 1, self.emb_dim)) * 0.1
        return params


def time_features(t: np.ndarray, dim: int, T: int) -> np.ndarray:
    return np.stack([F.sinusoidal_time_embed(int(s), dim, T) for s in np.atleast_1d(t)])


def denoiser_forward(arch: DenoiserArchitecture, p: ParamView, z_t, t, weights, color_latent=None) -> Tensor:
    """Velocity prediction for a batch.

    ``t`` holds one step per item, ``weights`` the tag mixing rows [N, V+1].
    """
    z_t = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t, dtype=np.float64)
    if arch.color_conditioned:
        if color_latent is None:
            raise ConditionError("color-conditioned denoiser needs a color latent")
        if color_latent.shape != z_t.shape:
            raise ConditionError(f"color latent {color_latent.shape} does not match diffusion latent {z_t.shape}")
        x = np.concatenate([z_t, color_latent], axis=1)
    else:
        x = z_t
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ConditionError(f"latent extent {x.shape[-2:]} must be even")
    mods = arch.modules()
    temb = Tensor(time_features(t, arch.time_dim, arch.T))
    emb = mods["time2"](p.sub("time2"), silu(mods["time1"](p.sub("time1"), temb)))
    emb = add(emb, matmul(Tensor(weights), p["cond.table"]))
    h0 = mods["enc0"](p.sub("enc0"), mods["conv_in"](p.sub("conv_in"), x), emb)
    h = mods["enc1"](p.sub("enc1"), mods["down"](p.sub("down"), h0), emb)
    h = mods["mid"](p.sub("mid"), mods["attn"](p.sub("attn"), h), emb)
    h = mods["up"](p.sub("up"), F.upsample_nearest2d(h, 2))
    h = mods["dec0"](p.sub("dec0"), concat([h, h0], axis=1), emb)
    return mods["conv_out"](p.sub("conv_out"), silu(mods["norm_out"](p.sub("norm_out"), h)))


def denoise(z_t, t: int, cond: Condition, arch: DenoiserArchitecture, params: dict[str, np.ndarray]) -> np.ndarray:
    """v-prediction for one latent [8,h,w]."""
    z_t = check_array(z_t, 3, "latent")
    if not 1 <= t <= arch.T:
        raise ConditionError(f"step {t} outside [1, {arch.T}]")
    color = None
    if cond.kind == "color_latent":
        if cond.color_latent.shape != z_t.shape:
            raise ConditionError(f"color latent {cond.color_latent.shape} does not match latent {z_t.shape}")
        color = cond.color_latent[None]
    with no_record():
        out = denoiser_forward(arch, ParamView(to_tensors(params)), z_t[None], [t], tag_weights([cond], arch.vocabulary), color)
    return out.data[0]


def guided_velocity(v_uncond: np.ndarray, v_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance; w = 0 and w = 1 return the inputs exactly."""
    if w == 0:
        return v_uncond
    if w == 1:
        return v_cond
    return v_uncond + w * (v_cond - v_uncond)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class DenoiserState:
    arch: DenoiserArchitecture
    params: dict[str, np.ndarray]
    optimizer: Adam = field(default_factory=Adam)
    step: int = 0
    rejected: int = 0
    null_routed: int = 0


def ldm_train_step(
    z0: np.ndarray,
    weights: np.ndarray,
    state: DenoiserState,
    sched: NoiseSchedule,
    rng,
    p_drop: float = 0.1,
    color_latent: np.ndarray | None = None,
) -> dict[str, float]:
    """One v-prediction regression step.

    Each item draws t ~ U{1..T} and eps ~ N(0, I); with probability ``p_drop``
    its tag weights are replaced by the null row. ``null_routed`` in the report
    counts the items that used the null row in this step.
    """
    rng = np.random.default_rng(rng)
    n = len(z0)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(z0.shape)
    z_t = np.stack([forward_noise(z0[i], int(t[i]), eps[i], sched) for i in range(n)])
    target = np.stack([velocity(z0[i], eps[i], int(t[i]), sched) for i in range(n)])
    weights = np.array(weights, dtype=np.float64)
    drop = rng.random(n) < p_drop
    weights[drop] = 0.0
    weights[drop, -1] = 1.0
    routed = int(np.count_nonzero(weights[:, -1] > 0))

    start = time.perf_counter()
    tensors = to_tensors(state.params, requires_grad=True)
    with Tape() as tape:
        pred = denoiser_forward(state.arch, ParamView(tensors), z_t, t, weights, color_latent)
        diff = pred - target
        loss = mean(diff * diff)
    value = float(loss.data)
    report = {"loss": value, "null_routed": float(routed)}
    if not np.isfinite(value):
        state.rejected += 1
        log.warning("ldm step %d rejected: non-finite loss", state.step)
        return {**report, "rejected": 1.0}
    try:
        grads = backward(loss, tape, sources=list(tensors.values()))
    except AutodiffError as err:
        state.rejected += 1
        log.warning("ldm step %d rejected: %s", state.step, err)
        return {**report, "rejected": 1.0}
    named = {tensor.name: g for tensor, g in grads.items()}
    state.optimizer.step(state.params, named)
    state.step += 1
    state.null_routed += routed
    report.update(step=state.step, grad_norm=global_norm(named), wall_time=time.perf_counter() - start, rejected=0.0)
    return report


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def _frozen(vae: JointVAE) -> str:
    check_is_fitted(vae, "state_")
    return vae.params_.fingerprint()


def model_depth_sample(color, depth, normal, intrinsics, tags) -> Sample:
    """Pack decoded outputs; the depth plane holds model depth, valid where positive."""
    valid = depth > 0
    return Sample(
        np.clip(color, 0.0, 1.0),
        MetricDepth(np.where(valid, depth, np.nan), valid),
        NormalMap(normal),
        intrinsics,
        list(tags),
    )


class _DenoiserBase(BaseEstimator):
    """Shared training loop and persistence over a frozen joint VAE."""

    _in_channels = LATENT_CHANNELS

    def _architecture(self) -> DenoiserArchitecture:
        return DenoiserArchitecture(
            in_channels=self._in_channels,
            widths=tuple(self.widths),
            emb_dim=self.emb_dim,
            T=self.T,
        )

    def _schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end, self.zero_terminal_snr)

    def _init_state(self, rng: np.random.Generator) -> None:
        arch = self._architecture()
        self.state_ = DenoiserState(arch, arch.init_params(rng), Adam(lr=self.learning_rate))
        self.history_ = []

    def _train(self, z0, weights, color_latent, p_drop, n_steps, rng) -> None:
        sched = self._schedule()
        before = _frozen(self.vae)
        for _ in range(n_steps):
            size = min(self.batch_size, len(z0))
            idx = np.sort(rng.choice(len(z0), size=size, replace=False))
            cl = None if color_latent is None else color_latent[idx]
            report = ldm_train_step(z0[idx], weights[idx], self.state_, sched, rng, p_drop, cl)
            self.history_.append(report)
            if self.state_.step % self.log_every == 0:
                log.info("ldm step %d loss %.5f", self.state_.step, report["loss"])
        if _frozen(self.vae) != before:
            raise RuntimeError("the joint VAE changed during denoiser training")

    def _forward(self, z, t: int, weights, color_latent=None) -> np.ndarray:
        with no_record():
            out = denoiser_forward(
                self.state_.arch, ParamView(to_tensors(self.state_.params)), z, np.full(len(z), t), weights, color_latent
            )
        return out.data

    def _decode(self, z: np.ndarray) -> VaeBatch:
        return self.vae.inverse_transform(z / self.latent_scale_)

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "state_")
        flat = dict(self.state_.params)
        flat["meta.latent_scale"] = np.array([self.latent_scale_])
        flat["meta.intrinsics"] = self.intrinsics_.as_array()
        flat["meta.image_shape"] = np.array(self.image_shape_, dtype=np.float64)
        save_params(path, flat)

    def load_weights(self, path: str | Path) -> "_DenoiserBase":
        flat = load_params(path)
        self.latent_scale_ = float(flat.pop("meta.latent_scale")[0])
        self.intrinsics_ = Intrinsics(*map(float, flat.pop("meta.intrinsics")))
        self.image_shape_ = tuple(int(v) for v in flat.pop("meta.image_shape"))
        arch = self._architecture()
        expected = set(arch.init_params(np.random.default_rng(0)))
        if set(flat) != expected:
            raise ValueError(f"checkpoint {path} does not match the configured denoiser architecture")
        self.state_ = DenoiserState(arch, flat, Adam(lr=self.learning_rate))
        self.history_ = []
        return self


class LatentDiffusion(_DenoiserBase):
    """Tag-conditioned joint latent diffusion with classifier-free guidance.

    Parameters
    ----------
    vae : fitted JointVAE, kept frozen.
    p_drop : probability of routing a training item to the null condition.
    guidance : default guidance weight ``w`` for :meth:`sample`.
    sample_steps : default DDIM step count.
    """

    def __init__(
        self,
        vae: JointVAE | None = None,
        widths=(32, 64),
        emb_dim: int = 64,
        T: int = 1000,
        beta_start: float = 0.00085,
        beta_end: float = 0.012,
        zero_terminal_snr: bool = True,
        p_drop: float = 0.1,
        guidance: float = 3.0,
        sample_steps: int = TEXT_STEPS,
        learning_rate: float = 1e-3,
        n_steps: int = 2000,
        batch_size: int = 8,
        log_every: int = 100,
        random_state=0,
    ):
        self.vae = vae
        self.widths = widths
        self.emb_dim = emb_dim
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.zero_terminal_snr = zero_terminal_snr
        self.p_drop = p_drop
        self.guidance = guidance
        self.sample_steps = sample_steps
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.log_every = log_every
        self.random_state = random_state

    def fit(self, X, y=None):
        """Train on synthdata samples, conditioning on their tags."""
        samples = check_samples(X)
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {self.p_drop}")
        rng = np.random.default_rng(self.random_state)
        mu = self.vae.transform(samples)
        self.latent_scale_ = 1.0 / float(mu.std())
        self.intrinsics_ = samples[0].intrinsics
        self.image_shape_ = samples[0].shape
        self._init_state(rng)
        weights = tag_weights([Condition.from_tags(s.tags) for s in samples], self.state_.arch.vocabulary)
        self._train(mu * self.latent_scale_, weights, None, self.p_drop, self.n_steps, rng)
        return self

    def velocity(self, z, t: int, tags: Sequence[str] | None, w: float) -> np.ndarray:
        """Guided prediction for a batch of latents sharing one condition."""
        vocab = self.state_.arch.vocabulary
        n = len(z)
        null = tag_weights([Condition()] * n, vocab)
        v_u = self._forward(z, t, null)
        if not tags or w == 0:
            return v_u
        v_c = self._forward(z, t, tag_weights([Condition.from_tags(tags)] * n, vocab))
        return guided_velocity(v_u, v_c, w)

    def sample_latents(
        self,
        tags: Sequence[str] | None = None,
        n: int = 1,
        steps: int | None = None,
        guidance: float | None = None,
        seed: int = 0,
        shape: tuple[int, int] | None = None,
        sampler: str = "ddim",
    ) -> np.ndarray:
        """Unscaled z0 latents [n,8,h,w]."""
        check_is_fitted(self, "state_")
        steps = self.sample_steps if steps is None else int(steps)
        w = check_weight(self.guidance if guidance is None else guidance, "guidance weight")
        if steps < 1:
            raise ValueError("steps must be >= 1")
        tag_weights([Condition.from_tags(tags or ())], self.state_.arch.vocabulary)
        h, w_lat = shape or self.latent_shape_
        sched = self._schedule()
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, LATENT_CHANNELS, h, w_lat))
        if sampler == "ddim":
            for t, t_prev in ddim_timesteps(sched.T, steps):
                z = ddim_step(z, self.velocity(z, t, tags, w), t, t_prev, sched)
        elif sampler == "ddpm":
            z = ddpm_sample(z, lambda zz, t: self.velocity(zz, t, tags, w), sched, steps, rng)
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
        return z / self.latent_scale_

    @property
    def latent_shape_(self) -> tuple[int, int]:
        h, w = self.image_shape_
        return h // self.vae.downsample, w // self.vae.downsample

    def sample(self, tags=None, n: int = 1, steps=None, guidance=None, seed: int = 0, sampler: str = "ddim") -> list[Sample]:
        z = self.sample_latents(tags, n, steps, guidance, seed, sampler=sampler)
        out = self.vae.inverse_transform(z)
        return [
            model_depth_sample(out.color[i], out.depth[i, 0], out.normal[i], self.intrinsics_, tags or ())
            for i in range(n)
        ]


def ddpm_sample(z: np.ndarray, predict, sched: NoiseSchedule, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling over ``steps`` evenly spaced steps (all T when steps >= T)."""
    timesteps = sorted({t for t, _ in ddim_timesteps(sched.T, min(steps, sched.T))})
    sub = respace(sched, timesteps)
    for i in range(len(timesteps), 0, -1):
        noise = rng.standard_normal(z.shape)
        z = ddpm_step(z, predict(z, timesteps[i - 1]), i, noise, sub)
    return z


class GeometryPredictor(_DenoiserBase):
    """Depth and normals from color via color-latent-conditioned diffusion.

    The clean color-only latent of the input is concatenated to the noisy
    joint latent at every step; tags are never used (null row throughout).
    """

    _in_channels = 2 * LATENT_CHANNELS

    def __init__(
        self,
        vae: JointVAE | None = None,
        widths=(32, 64),
        emb_dim: int = 64,
        T: int = 1000,
        beta_start: float = 0.00085,
        beta_end: float = 0.012,
        zero_terminal_snr: bool = True,
        sample_steps: int = COLOR_STEPS,
        learning_rate: float = 1e-3,
        n_steps: int = 2000,
        batch_size: int = 8,
        log_every: int = 100,
        random_state=0,
    ):
        self.vae = vae
        self.widths = widths
        self.emb_dim = emb_dim
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.zero_terminal_snr = zero_terminal_snr
        self.sample_steps = sample_steps
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.log_every = log_every
        self.random_state = random_state

    @classmethod
    def from_text_model(cls, text_model: LatentDiffusion, **kwargs) -> "GeometryPredictor":
        """Start from tag-model weights; the extra color-latent input channels start at zero."""
        check_is_fitted(text_model, "state_")
        params = dict(
            vae=text_model.vae,
            widths=text_model.widths,
            emb_dim=text_model.emb_dim,
            T=text_model.T,
            beta_start=text_model.beta_start,
            beta_end=text_model.beta_end,
            zero_terminal_snr=text_model.zero_terminal_snr,
            random_state=text_model.random_state,
        )
        params.update(kwargs)
        model = cls(**params)
        model.init_from_ = {k: v.copy() for k, v in text_model.state_.params.items()}
        return model

    def _initial_params(self, rng) -> dict[str, np.ndarray]:
        arch = self._architecture()
        params = arch.init_params(rng)
        base = getattr(self, "init_from_", None)
        if base is None:
            return params
        for name, value in base.items():
            if name == "conv_in.weight":
                params[name] = np.zeros_like(params[name])
                params[name][:, :LATENT_CHANNELS] = value
            else:
                params[name] = value.copy()
        return params

    def fit(self, X, y=None):
        """Train on synthdata samples with their own color latents as the condition."""
        samples = check_samples(X)
        rng = np.random.default_rng(self.random_state)
        mu = self.vae.transform(samples)
        color_mu = self.vae.encode_color(np.stack([s.color for s in samples]))
        self.latent_scale_ = 1.0 / float(mu.std())
        self.intrinsics_ = samples[0].intrinsics
        self.image_shape_ = samples[0].shape
        self._init_state(rng)
        self.state_.params = self._initial_params(rng)
        weights = tag_weights([Condition()] * len(samples), self.state_.arch.vocabulary)
        self._train(mu * self.latent_scale_, weights, color_mu * self.latent_scale_, 0.0, self.n_steps, rng)
        return self

    def predict_latents(self, color, steps: int | None = None, seed: int = 0) -> np.ndarray:
        check_is_fitted(self, "state_")
        color = check_array(color, (3, 4), "color")
        if color.ndim == 3:
            color = color[None]
        check_divisible(*color.shape[-2:], self.vae.downsample, "color")
        steps = self.sample_steps if steps is None else int(steps)
        if steps < 1:
            raise ValueError("steps must be >= 1")
        cond = self.vae.encode_color(color) * self.latent_scale_
        sched = self._schedule()
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(cond.shape)
        null = tag_weights([Condition()] * len(z), self.state_.arch.vocabulary)
        for t, t_prev in ddim_timesteps(sched.T, steps):
            z = ddim_step(z, self._forward(z, t, null, cond), t, t_prev, sched)
        return z / self.latent_scale_

    def predict(self, X, steps: int | None = None, seed: int = 0) -> list[tuple[ModelDepth, NormalMap]]:
        """(model depth, normals) per image; accepts samples or color arrays [N,3,H,W]."""
        if isinstance(X, Sample) or (isinstance(X, (list, tuple)) and X and isinstance(X[0], Sample)):
            color = np.stack([s.color for s in check_samples(X)])
        else:
            color = X
        z = self.predict_latents(color, steps, seed)
        out = self.vae.inverse_transform(z)
        results = []
        for i in range(len(z)):
            d = out.depth[i, 0]
            valid = d > 0
            # normalization constants of a prediction are unknown
            results.append((ModelDepth(d, valid, np.nan, np.nan), NormalMap(out.normal[i])))
        return results

    def predict_samples(self, X, steps: int | None = None, seed: int = 0) -> list[Sample]:
        samples = check_samples(X) if not isinstance(X, np.ndarray) else None
        color = np.stack([s.color for s in samples]) if samples else X
        z = self.predict_latents(color, steps, seed)
        out = self.vae.inverse_transform(z)
        tags = [s.tags for s in samples] if samples else [[]] * len(z)
        return [
            model_depth_sample(np.asarray(color)[i], out.depth[i, 0], out.normal[i], self.intrinsics_, tags[i])
            for i in range(len(z))
        ]


__all__ = [
    "COLOR_STEPS",
    "Condition",
    "ConditionError",
    "DenoiserArchitecture",
    "DenoiserState",
    "GeometryPredictor",
    "LatentDiffusion",
    "TEXT_STEPS",
    "ddpm_sample",
    "denoise",
    "denoiser_forward",
    "guided_velocity",
    "ldm_train_step",
    "tag_weights",
]
