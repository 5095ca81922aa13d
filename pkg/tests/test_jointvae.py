import json

import numpy as np
import pytest

from orchidkit import jointvae as jv
from orchidkit.geometry import preprocess_depth
from orchidkit.jointvae import (
    JointVAE,
    JointVaeParams,
    TrainingError,
    VaeArchitecture,
    VaeBatch,
    VaeLossWeights,
    VaeTrainState,
    vae_losses,
    vae_train_step,
)
from orchidkit.ndcore import AutodiffError, Tensor, to_tensors
from orchidkit.ndcore.gradcheck import check_gradients
from orchidkit.synthdata import generate_samples

TINY = VaeArchitecture(widths=(4, 8), blocks=1, disc_widths=(4, 4))


@pytest.fixture(scope="module")
def tiny_batch():
    return VaeBatch.from_samples(generate_samples(4, seed=2, height=8, width=8))


@pytest.fixture(scope="module")
def fitted():
    return JointVAE(n_steps=0).fit(generate_samples(2, seed=0, height=32, width=32))


def fresh_state(seed=0, **kw):
    return VaeTrainState(JointVaeParams.initialize(TINY, np.random.default_rng(seed)), **kw)


def groups_of(params):
    return {g: {k: v.copy() for k, v in params.theta.items() if k.startswith(g + ".")} for g in jv.GROUPS}


def same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


class TestEncodeDecode:
    def test_latent_shape(self, fitted):
        s = generate_samples(1, seed=1, height=32, width=32)[0]
        dist, z = fitted.encode_sample(s.color, preprocess_depth(s.depth), s.normal, rng=0)
        assert dist.mu.shape == z.shape == (8, 4, 4)

    def test_deterministic_given_seed(self, fitted):
        s = generate_samples(1, seed=1, height=32, width=32)[0]
        d = preprocess_depth(s.depth)
        _, a = fitted.encode_sample(s.color, d, s.normal, rng=5)
        _, b = fitted.encode_sample(s.color, d, s.normal, rng=5)
        np.testing.assert_array_equal(a, b)

    def test_variance_collapse(self, fitted, monkeypatch):
        s = generate_samples(1, seed=1, height=32, width=32)[0]
        real = jv.encoder_forward

        def collapsed(arch, p, x):
            mu, lv = real(arch, p, x)
            return mu, jv.clip(lv * 0.0 - 1e3, *jv.LOG_VAR_RANGE)

        monkeypatch.setattr(jv, "encoder_forward", collapsed)
        dist, z = fitted.encode_sample(s.color, preprocess_depth(s.depth), s.normal, rng=1)
        assert dist.log_var.min() == -30.0
        np.testing.assert_allclose(z, dist.mu, atol=1e-6)

    def test_indivisible_rejected(self, fitted):
        s = generate_samples(1, seed=1, height=12, width=12)[0]
        with pytest.raises(ValueError, match="divisible"):
            fitted.encode_sample(s.color, preprocess_depth(s.depth), s.normal)

    def test_heads(self, fitted):
        z = np.random.default_rng(0).normal(0, 3, (8, 4, 4))
        color, depth, normal = fitted.decode(z)
        assert color.shape == (3, 32, 32) and 0 <= color.min() and color.max() <= 1
        assert depth.min() >= 0
        np.testing.assert_allclose(np.linalg.norm(normal.vectors, axis=0), 1.0, atol=1e-9)

    def test_channel_mismatch(self, fitted):
        with pytest.raises(Exception):
            fitted.decode(np.zeros((4, 4, 4)))


class TestLosses:
    def test_perfect_reconstruction_is_zero(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(2, 3, 8, 8))
        d = rng.uniform(size=(2, 1, 8, 8))
        n = rng.normal(size=(2, 3, 8, 8))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        assert jv.pixel_l2(Tensor(x) - x).item() == 0.0
        assert jv.pixel_l2(Tensor(n) - n, np.ones((2, 1, 8, 8))).item() == 0.0
        assert jv.depth_gradient_loss(Tensor(d), d).item() == 0.0
        assert jv.local_disc_loss(Tensor(x), x).item() == 0.0
        assert jv.perceptual_loss(Tensor(x), x, jv.PerceptualFeatures()).item() == 0.0
        assert jv.kl_divergence(Tensor(np.zeros((2, 8, 2, 2))), np.zeros((2, 8, 2, 2))).item() == 0.0

    def test_kl_matches_monte_carlo(self):
        rng = np.random.default_rng(1)
        mu = rng.normal(size=6)
        log_var = rng.normal(scale=0.5, size=6)
        closed = jv.kl_divergence(Tensor(mu), log_var).item() * mu.size
        sd = np.exp(0.5 * log_var)
        z = mu + sd * rng.standard_normal((200_000, 6))
        # log q(z) - log p(z), summed over dimensions
        terms = np.sum(-0.5 * ((z - mu) / sd) ** 2 - np.log(sd) + 0.5 * z**2, axis=1)
        se = terms.std() / np.sqrt(len(terms))
        assert abs(terms.mean() - closed) < 3 * se

    def test_weighted_sum_recomputed(self, tiny_batch):
        params = JointVaeParams.initialize(TINY, np.random.default_rng(0))
        w = VaeLossWeights()
        out = vae_losses(tiny_batch, params, w, rng=3)
        assert out["L_x"] == pytest.approx(
            out["rec"] + 0.1 * out["adv"] + 0.1 * out["perceptual"] + out["local_disc"], rel=1e-12
        )
        assert out["L_d"] == pytest.approx(out["depth_rec"] + 0.5 * out["depth_grad"], rel=1e-12)
        assert out["L_n"] == pytest.approx(out["normal_rec"], rel=1e-12)
        assert out["L_KL"] == pytest.approx(1e-3 * out["kl"], rel=1e-12)
        assert out["L_distill"] == 0.0
        assert set(out) >= {"L_x", "L_d", "L_n", "L_KL", "L_distill", "L_disc"}

    def test_non_finite_loss_raises(self, tiny_batch):
        params = JointVaeParams.initialize(TINY, np.random.default_rng(0))
        params.theta["dec.conv_out.bias"][:] = np.nan
        with pytest.raises(TrainingError, match="non-finite"), np.errstate(invalid="ignore"):
            vae_losses(tiny_batch, params, VaeLossWeights(), rng=0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            VaeLossWeights(w_kl=-1.0)


class TestGradients:
    TOL = 1e-6

    @pytest.fixture
    def pair(self):
        rng = np.random.default_rng(4)
        return rng.uniform(0.1, 0.9, (2, 3, 8, 8)), rng.uniform(0.1, 0.9, (2, 3, 8, 8))

    def test_pixel_l2(self, pair):
        pred, target = pair
        mask = (np.random.default_rng(0).uniform(size=(2, 1, 8, 8)) > 0.3).astype(float)
        assert max(check_gradients(lambda t: jv.pixel_l2(t[0] - target, mask), [pred])) < self.TOL

    def test_depth_gradient(self, pair):
        pred, target = pair
        errs = check_gradients(lambda t: jv.depth_gradient_loss(t[0], target[:, :1]), [pred[:, :1].copy()])
        assert max(errs) < self.TOL

    def test_local_disc(self, pair):
        pred, target = pair
        assert max(check_gradients(lambda t: jv.local_disc_loss(t[0], target, 3), [pred])) < self.TOL

    def test_perceptual(self, pair):
        pred, target = pair
        extractor = jv.PerceptualFeatures((4, 4), seed=0)
        assert max(check_gradients(lambda t: jv.perceptual_loss(t[0], target, extractor), [pred])) < self.TOL

    def test_kl(self):
        rng = np.random.default_rng(5)
        errs = check_gradients(lambda t: jv.kl_divergence(t[0], t[1]), [rng.normal(size=(2, 8, 2, 2)), rng.normal(size=(2, 8, 2, 2))])
        assert max(errs) < self.TOL

    def test_adversarial_terms(self):
        rng = np.random.default_rng(6)
        real, fake = rng.normal(size=(2, 1, 2, 2)), rng.normal(size=(2, 1, 2, 2))
        assert max(check_gradients(lambda t: jv.generator_adversarial(t[0]), [fake])) < self.TOL
        assert max(check_gradients(lambda t: jv.discriminator_loss(t[0], t[1]), [real, fake])) < self.TOL

    def test_end_to_end_objective(self, tiny_batch):
        params = JointVaeParams.initialize(TINY, np.random.default_rng(1))
        rng = np.random.default_rng(0)
        for k in params.theta:
            params.theta[k] = params.theta[k] + rng.normal(scale=0.05, size=params.theta[k].shape)
        names = ["enc.conv_out.bias", "dec.conv_in.bias", "dec.norm_out.gamma"]
        w = VaeLossWeights(perceptual_channels=(4, 4), w_distill=1e-2)

        def objective(leaves):
            tensors = to_tensors(params.theta)
            tensors.update(zip(names, leaves))
            g = jv._loss_graph(tiny_batch.subset(slice(0, 2)), params, tensors, w, np.random.default_rng(9))
            return g["L_x"] + g["L_d"] + g["L_n"] + g["L_KL"] + g["L_distill"]

        assert max(check_gradients(objective, [params.theta[n].copy() for n in names])) < self.TOL


class TestPartition:
    def test_zero_objective_leaves_generator_unchanged(self, tiny_batch):
        state = fresh_state()
        before = groups_of(state.params)
        vae_train_step(tiny_batch, state, VaeLossWeights.zeros(), rng=0)
        after = groups_of(state.params)
        assert same(before["enc"], after["enc"]) and same(before["dec"], after["dec"])
        # the discriminator keeps its own objective
        assert not same(before["disc"], after["disc"])

    def test_kl_weight_does_not_reach_disc_or_dec(self, tiny_batch):
        a, b = fresh_state(), fresh_state()
        vae_train_step(tiny_batch, a, VaeLossWeights(w_kl=1e-3), rng=7)
        vae_train_step(tiny_batch, b, VaeLossWeights(w_kl=10.0), rng=7)
        ga, gb = groups_of(a.params), groups_of(b.params)
        assert same(ga["disc"], gb["disc"]) and same(ga["dec"], gb["dec"])
        assert not same(ga["enc"], gb["enc"])

    def test_gamma_does_not_reach_encoder(self, tiny_batch):
        a, b = fresh_state(), fresh_state()
        vae_train_step(tiny_batch, a, VaeLossWeights(gamma=0.0), rng=7)
        vae_train_step(tiny_batch, b, VaeLossWeights(gamma=5.0), rng=7)
        ga, gb = groups_of(a.params), groups_of(b.params)
        assert same(ga["enc"], gb["enc"]) and same(ga["disc"], gb["disc"])
        assert not same(ga["dec"], gb["dec"])

    def test_distill_zero_at_init_then_nonnegative(self, tiny_batch):
        state = fresh_state()
        assert vae_losses(tiny_batch, state.params, VaeLossWeights(), rng=0)["L_distill"] == 0.0
        star = {k: v.copy() for k, v in state.params.enc_star.items()}
        for i in range(3):
            vae_train_step(tiny_batch, state, VaeLossWeights(), rng=i)
        assert vae_losses(tiny_batch, state.params, VaeLossWeights(), rng=0)["distill"] > 0.0
        assert same(star, state.params.enc_star)

    def test_snapshot_is_read_only(self):
        state = fresh_state()
        with pytest.raises(ValueError):
            state.params.enc_star["enc.conv_in.weight"][0] = 1.0

    @pytest.mark.parametrize("decay", [0.0, 1.0])
    def test_ema_limits(self, tiny_batch, decay):
        state = fresh_state(ema_decay=decay)
        initial = {k: v.copy() for k, v in state.params.ema.items()}
        vae_train_step(tiny_batch, state, VaeLossWeights(), rng=0)
        expected = {k: state.params.theta[k] for k in initial} if decay == 0.0 else initial
        assert same(expected, state.params.ema)

    def test_nan_gradient_rejected(self, tiny_batch, monkeypatch, caplog):
        state = fresh_state()
        before = {k: v.copy() for k, v in state.params.theta.items()}

        def broken(*args, **kwargs):
            raise AutodiffError("non-finite gradient produced by node kind 'log'")

        monkeypatch.setattr(jv, "backward", broken)
        report = vae_train_step(tiny_batch, state, VaeLossWeights(), rng=0)
        assert report["rejected"] == 1.0 and state.rejected == 1 and state.step == 0
        assert same(before, state.params.theta)
        assert "rejected" in caplog.text


class TestEstimator:
    def test_sklearn_params(self):
        vae = JointVAE(widths=(4, 8), blocks=1)
        assert vae.get_params()["widths"] == (4, 8)
        assert vae.set_params(n_steps=3).n_steps == 3

    def test_transform_round_trip_shapes(self):
        samples = generate_samples(3, seed=1, height=8, width=8)
        vae = JointVAE(widths=(4, 8), blocks=1, n_steps=2, batch_size=2).fit(samples)
        z = vae.transform(samples)
        assert z.shape == (3, 8, 2, 2)
        out = vae.inverse_transform(z)
        assert out.color.shape == (3, 3, 8, 8)
        np.testing.assert_array_equal(vae.fit_transform(samples), vae.transform(samples))

    def test_json_log(self, tmp_path):
        path = tmp_path / "log.jsonl"
        samples = generate_samples(2, seed=1, height=8, width=8)
        JointVAE(widths=(4, 8), blocks=1, n_steps=3, log_path=str(path), log_every=1).fit(samples)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["step"] for r in records] == [1, 2, 3]
        assert {"L_x", "L_d", "L_n", "L_KL", "L_distill", "L_disc", "grad_norm", "wall_time"} <= set(records[0])

    def test_save_load(self, tmp_path):
        samples = generate_samples(2, seed=1, height=8, width=8)
        vae = JointVAE(widths=(4, 8), blocks=1, n_steps=2).fit(samples)
        vae.save(tmp_path / "vae.ckpt")
        back = JointVAE.load(tmp_path / "vae.ckpt")
        np.testing.assert_array_equal(back.transform(samples), vae.transform(samples))
        assert back.params_.fingerprint() == vae.params_.fingerprint()

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            JointVAE().transform(generate_samples(1, seed=0, height=8, width=8))

    def test_descent_over_200_steps(self):
        batch = VaeBatch.from_samples(generate_samples(8, seed=3, height=8, width=8))
        state = fresh_state()
        w = VaeLossWeights()
        first = vae_losses(batch, state.params, w, rng=0)
        for i in range(200):
            vae_train_step(batch, state, w, rng=i)
        last = vae_losses(batch, state.params, w, rng=0)
        total = lambda r: r["L_x"] + r["L_d"] + r["L_n"] + r["L_KL"] + r["L_distill"]  # noqa: E731
        assert total(last) < total(first)


@pytest.mark.slow
def test_single_sample_overfit_psnr():
    sample = generate_samples(1, seed=0, height=32, width=32)
    vae = JointVAE(n_steps=2000, batch_size=1, use_ema=False, random_state=0).fit(sample)
    assert vae.reconstruction_report(sample)["psnr"] >= 35.0
