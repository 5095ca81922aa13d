import warnings

import numpy as np
import pytest

from orchidkit.geometry import align_affine, depth_normal_inconsistency
from orchidkit.inpaint import (
    InpaintError,
    InpaintTask,
    derive_latent_mask,
    inpaint,
    jump_schedule,
    load_mask,
    save_mask,
)
from orchidkit.jointvae import JointVAE
from orchidkit.ldm import LatentDiffusion
from orchidkit.synthdata import SceneSpec, generate_samples, render


@pytest.fixture(scope="module")
def samples():
    return generate_samples(4, seed=6, height=16, width=16)


@pytest.fixture(scope="module")
def model(samples):
    vae = JointVAE(widths=(4, 8), blocks=1, n_steps=0).fit(samples)
    return LatentDiffusion(vae, widths=(8, 16), emb_dim=16, n_steps=3, batch_size=4).fit(samples)


def task(sample, mask, **kw):
    kw.setdefault("downsample", 4)
    return InpaintTask(sample, mask, **kw)


class TestLatentMask:
    def test_empty(self):
        assert not derive_latent_mask(np.zeros((32, 32), bool), 8).any()

    def test_full(self):
        assert derive_latent_mask(np.ones((32, 32), bool), 8).all()

    def test_single_pixel_dilates_to_block(self):
        m = np.zeros((64, 64), bool)
        m[35, 20] = True
        cells = derive_latent_mask(m, 8, dilation=1)
        expected = np.zeros((8, 8), bool)
        expected[3:6, 1:4] = True
        np.testing.assert_array_equal(cells, expected)

    def test_clipped_at_border(self):
        m = np.zeros((32, 32), bool)
        m[0, 0] = True
        cells = derive_latent_mask(m, 8, dilation=1)
        assert cells.sum() == 4 and cells[:2, :2].all()

    def test_no_dilation(self):
        m = np.zeros((32, 32), bool)
        m[9, 9] = True
        assert derive_latent_mask(m, 8, dilation=0).sum() == 1

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            derive_latent_mask(np.zeros((30, 32), bool), 8)

    def test_mask_round_trip(self, tmp_path):
        m = np.random.default_rng(0).random((16, 24)) > 0.5
        save_mask(tmp_path / "m.png", m)
        np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


class TestJumpSchedule:
    def test_no_jumps(self):
        assert jump_schedule(5, 0, 4) == [5, 4, 3, 2, 1, 0]
        assert jump_schedule(5, 2, 1) == [5, 4, 3, 2, 1, 0]

    def test_jumps(self):
        path = jump_schedule(6, 2, 2)
        assert path == [6, 5, 4, 5, 6, 5, 4, 3, 2, 3, 4, 3, 2, 1, 0]
        assert all(abs(a - b) == 1 for a, b in zip(path, path[1:]))


class TestTaskValidation:
    def test_shape_mismatch(self, samples):
        with pytest.raises(InpaintError):
            task(samples[0], np.zeros((8, 8), bool))

    def test_full_mask_warns(self, samples):
        with pytest.warns(UserWarning, match="unconditional"):
            task(samples[0], np.ones((16, 16), bool))

    def test_full_mask_declared(self, samples):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            task(samples[0], np.ones((16, 16), bool), allow_unconditional=True)

    def test_downsample_mismatch(self, samples, model):
        with pytest.raises(InpaintError):
            inpaint(InpaintTask(samples[0], np.zeros((16, 16), bool), downsample=8), model, steps=2)


class TestContract:
    def test_empty_mask_is_reconstruction(self, samples, model):
        s = samples[1]
        result = inpaint(task(s, np.zeros((16, 16), bool)), model, steps=5, seed=0)
        mu = model.vae.transform([s])[0]
        np.testing.assert_array_equal(result.latent, mu)
        recon = model.vae.inverse_transform(mu[None])
        np.testing.assert_array_equal(result.sample.color, np.clip(recon.color[0], 0, 1))
        np.testing.assert_array_equal(result.sample.normal.vectors, recon.normal[0])

    def test_unmasked_cells_bitwise_known(self, samples, model):
        s = samples[2]
        m = np.zeros((16, 16), bool)
        m[:, 12:] = True
        result = inpaint(task(s, m, dilation=0, resample_count=2, jump_length=2), model, steps=6, seed=1)
        mu = model.vae.transform([s])[0]
        keep = ~result.latent_mask
        assert keep.any() and result.latent_mask.any()
        np.testing.assert_array_equal(result.latent[:, keep], mu[:, keep])
        assert not np.array_equal(result.latent[:, ~keep], mu[:, ~keep])

    def test_full_mask_matches_ancestral_sampling(self, samples, model):
        t = task(samples[0], np.ones((16, 16), bool), resample_count=1, jump_length=0, allow_unconditional=True)
        result = inpaint(t, model, steps=7, seed=5)
        reference = model.sample_latents(None, n=1, steps=7, seed=5, sampler="ddpm")[0]
        np.testing.assert_array_equal(result.latent, reference)

    def test_reproducible(self, samples, model):
        m = np.zeros((16, 16), bool)
        m[1:3, 1:3] = True
        a = inpaint(task(samples[3], m), model, steps=12, seed=2)
        b = inpaint(task(samples[3], m), model, steps=12, seed=2)
        np.testing.assert_array_equal(a.latent, b.latent)


@pytest.mark.slow
def test_inpainted_plane_as_consistent_as_known_half():
    # ground plane filling the view, seen from several heights and tilts
    views = [(pitch, height) for pitch in (0.6, 0.7, 0.8, 0.9) for height in (1.0, 1.4)]
    planes = [render(SceneSpec(seed=i, pitch=p, camera_height=h, back_wall=False), 32, 32) for i, (p, h) in enumerate(views)]
    vae = JointVAE(widths=(16, 32), blocks=1, n_steps=1500, batch_size=8, random_state=0).fit(planes)
    ldm = LatentDiffusion(vae, n_steps=1500, batch_size=8, random_state=0).fit(planes)
    known = planes[3]
    mask = np.zeros((32, 32), bool)
    mask[:, 16:] = True
    out = inpaint(InpaintTask(known, mask, downsample=vae.downsample), ldm, steps=50, seed=0).sample
    depth = align_affine(out.depth.values, known.depth, pred_valid=out.depth.valid)
    _, err = depth_normal_inconsistency(depth, out.normal, known.intrinsics)
    assert np.nanmean(err[mask]) <= 2.0 * np.nanmean(err[~mask])
