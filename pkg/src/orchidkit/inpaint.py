"""Joint color-depth-normal inpainting by masked latent resampling.

Known latents are forward-noised to the current step and merged with the
generated latents outside the mask; periodic jumps re-noise the merged state
and denoise it again so the generated region can harmonize with the known one.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from sklearn.utils.validation import check_is_fitted

from .ldm import LatentDiffusion, model_depth_sample
from .schedule import ddim_timesteps, ddpm_step, forward_noise, respace
from .synthdata import Sample
from .utils.validation import check_divisible

log = logging.getLogger(__name__)

MASK_THRESHOLD = 128


class InpaintError(ValueError):
    pass


def derive_latent_mask(pixel_mask: np.ndarray, downsample: int, dilation: int = 1) -> np.ndarray:
    """Latent cells whose pixel block touches the mask, grown by ``dilation`` cells."""
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if pixel_mask.ndim != 2:
        raise InpaintError(f"pixel mask must be [H,W], got {pixel_mask.shape}")
    if dilation < 0:
        raise InpaintError("dilation must be >= 0")
    h, w = pixel_mask.shape
    check_divisible(h, w, downsample, "mask")
    cells = pixel_mask.reshape(h // downsample, downsample, w // downsample, downsample).any(axis=(1, 3))
    if dilation and cells.any():
        cells = ndimage.binary_dilation(cells, structure=np.ones((2 * dilation + 1,) * 2, bool))
    return cells


def load_mask(path: str | Path) -> np.ndarray:
    """Grayscale raster where values >= 128 are to be generated."""
    return np.asarray(Image.open(path).convert("L")) >= MASK_THRESHOLD


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


@dataclass
class InpaintTask:
    known: Sample
    mask: np.ndarray
    resample_count: int = 4
    jump_length: int = 10
    dilation: int = 1
    tags: tuple[str, ...] = ()
    allow_unconditional: bool = False
    downsample: int = 8
    latent_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.known.shape:
            raise InpaintError(f"mask {self.mask.shape} does not match sample {self.known.shape}")
        if self.resample_count < 1 or self.jump_length < 0:
            raise InpaintError("need resample_count >= 1 and jump_length >= 0")
        self.tags = tuple(self.tags)
        self.latent_mask = derive_latent_mask(self.mask, self.downsample, self.dilation)
        if self.latent_mask.all() and not self.allow_unconditional:
            warnings.warn("mask covers every latent cell; running unconditional generation", stacklevel=2)


@dataclass
class InpaintResult:
    latent: np.ndarray
    sample: Sample
    latent_mask: np.ndarray


def jump_schedule(steps: int, jump_length: int, resample_count: int) -> list[int]:
    """Visited step indices from ``steps`` down to 0, including re-noising jumps.

    A move k -> k-1 is a denoising step, k -> k+1 a forward re-noising step.
    Jumps start at every multiple of ``jump_length`` below ``steps - jump_length``
    and repeat ``resample_count - 1`` times.
    """
    remaining = {}
    if jump_length > 0 and resample_count > 1:
        for k in range(jump_length, steps - jump_length + 1, jump_length):
            remaining[k] = resample_count - 1
    k = steps
    path = [k]
    while k > 0:
        k -= 1
        path.append(k)
        if remaining.get(k, 0) > 0:
            remaining[k] -= 1
            for _ in range(jump_length):
                k += 1
                path.append(k)
    return path


def inpaint(task: InpaintTask, model: LatentDiffusion, steps: int = 50, seed: int = 0, guidance: float | None = None) -> InpaintResult:
    """Fill the masked region of ``task.known`` with the tag/unconditional prior.

    The generation stream is ``default_rng(seed)`` drawn in the same order as
    ancestral sampling, so a full mask with no jumps reproduces
    ``model.sample_latents(..., sampler="ddpm")``. Known-branch noise comes from
    an independent stream.
    """
    check_is_fitted(model, "state_")
    vae = model.vae
    if task.downsample != vae.downsample:
        raise InpaintError(f"task downsample {task.downsample} differs from the VAE's {vae.downsample}")
    w = model.guidance if guidance is None else guidance
    mu_known = vae.transform([task.known])
    mask = np.broadcast_to(task.latent_mask, mu_known.shape)
    sched = model._schedule()
    scale = model.latent_scale_
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(mu_known.shape)
    if mask.any():
        known_rng = np.random.default_rng([seed, 1])
        z0_known = mu_known * scale
        timesteps = sorted({t for t, _ in ddim_timesteps(sched.T, min(steps, sched.T))})
        sub = respace(sched, timesteps)
        path = jump_schedule(len(timesteps), task.jump_length, task.resample_count)
        for k, k_next in zip(path, path[1:]):
            if k_next == k - 1:
                noise = rng.standard_normal(z.shape)
                v = model.velocity(z, timesteps[k - 1], task.tags, w)
                z_gen = ddpm_step(z, v, k, noise, sub)
                if k_next == 0:
                    z_known = z0_known
                else:
                    z_known = forward_noise(z0_known, k_next, known_rng.standard_normal(z.shape), sub)
                z = np.where(mask, z_gen, z_known)
            else:
                # q(z_{k+1} | z_k)
                beta = float(sub.beta[k_next - 1])
                z = np.sqrt(1.0 - beta) * z + np.sqrt(beta) * known_rng.standard_normal(z.shape)
            if not np.all(np.isfinite(z)):
                raise InpaintError(f"non-finite latent at step {k_next}")
    latent = np.where(mask, z / scale, mu_known)
    out = vae.inverse_transform(latent)
    sample = model_depth_sample(out.color[0], out.depth[0, 0], out.normal[0], task.known.intrinsics, task.tags)
    return InpaintResult(latent[0], sample, task.latent_mask)


__all__ = [
    "InpaintError",
    "InpaintResult",
    "InpaintTask",
    "derive_latent_mask",
    "inpaint",
    "jump_schedule",
    "load_mask",
    "save_mask",
]
