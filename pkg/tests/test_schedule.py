import numpy as np
import pytest

from orchidkit.schedule import (
    NoiseSchedule,
    ScheduleError,
    build_schedule,
    convert,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    forward_noise,
    posterior_mean,
    velocity,
)

KINDS = ("epsilon", "x0", "v")


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def test_zero_terminal_defaults(sched):
    assert sched.T == 1000
    assert sched.alpha_bar[-1] <= 1e-12
    assert np.all(np.diff(sched.alpha_bar) < 0)
    plain = build_schedule(zero_terminal_snr=False)
    assert sched.alpha_bar[0] == pytest.approx(plain.alpha_bar[0], rel=1e-12)
    assert sched.alpha_bar[0] == pytest.approx(1 - sched.beta[0], rel=1e-12)
    assert np.all((sched.beta[:-1] > 0) & (sched.beta[:-1] < 1))


def test_hand_schedule():
    s = NoiseSchedule.from_betas([0.5, 0.5])
    np.testing.assert_allclose(s.alpha_bar, [0.5, 0.25])
    assert s.sigma[0] == 0.0


def test_terminal_snr_positive_without_flag():
    assert build_schedule(zero_terminal_snr=False).terminal_snr > 0
    assert build_schedule().terminal_snr == 0


@pytest.mark.parametrize("kwargs", [dict(T=1), dict(beta_start=0.0), dict(beta_start=0.02, beta_end=0.01), dict(beta_end=1.0)])
def test_build_rejects(kwargs):
    with pytest.raises(ScheduleError):
        build_schedule(**kwargs)


def test_forward_noise_endpoints(sched):
    rng = np.random.default_rng(0)
    z0, eps = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    np.testing.assert_array_equal(forward_noise(z0, 0, eps, sched), z0)
    np.testing.assert_array_equal(forward_noise(z0, sched.T, eps, sched), eps)
    with pytest.raises(ScheduleError):
        forward_noise(z0, 3, eps[:1], sched)


def test_forward_noise_monte_carlo(sched):
    rng = np.random.default_rng(1)
    t = 400
    z0 = np.array([0.7, -1.3, 2.0])
    draws = forward_noise(np.broadcast_to(z0, (100_000, 3)), t, rng.normal(size=(100_000, 3)), sched)
    a, b = sched.coefficients(t)
    se = b / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - a * z0) < 3 * se)
    # variance b^2, standard error of the sample variance ~ b^2 sqrt(2/n)
    assert np.all(np.abs(draws.var(axis=0) - b * b) < 3 * b * b * np.sqrt(2 / len(draws)))


@pytest.mark.parametrize("t", [1, 17, 500, 999])
def test_conversions_consistent(sched, t):
    rng = np.random.default_rng(t)
    z0, eps = rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 5, 5))
    z_t = forward_noise(z0, t, eps, sched)
    truth = {"x0": z0, "epsilon": eps, "v": velocity(z0, eps, t, sched)}
    for src in KINDS:
        for dst in KINDS:
            if src != dst:
                out = convert(truth[src], z_t, t, src, dst, sched)
                np.testing.assert_allclose(out, truth[dst], atol=1e-10, err_msg=f"{src}->{dst}")


def test_round_trip_v_eps(sched):
    rng = np.random.default_rng(3)
    v, z = rng.normal(size=10), rng.normal(size=10)
    back = convert(convert(v, z, 250, "v", "epsilon", sched), z, 250, "epsilon", "v", sched)
    np.testing.assert_allclose(back, v, atol=1e-12)


def test_convert_errors(sched):
    z = np.zeros(3)
    with pytest.raises(ScheduleError):
        convert(z, z, 0, "v", "x0", sched)
    with pytest.raises(ScheduleError):
        convert(z, z, 5, "v", "v", sched)
    with pytest.raises(ScheduleError):
        convert(z, z, sched.T, "epsilon", "x0", sched)


def test_v_to_x0_at_clean_endpoint():
    s = NoiseSchedule.from_betas([0.0, 0.5])
    z = np.array([1.0, 2.0])
    np.testing.assert_array_equal(convert(np.array([5.0, -3.0]), z, 1, "v", "x0", s), z)


def test_ddpm_last_step_is_noise_free(sched):
    z, v = np.ones(4), np.full(4, 0.2)
    a = ddpm_step(z, v, 1, np.full(4, 100.0), sched)
    b = ddpm_step(z, v, 1, np.zeros(4), sched)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("t", [2, 30, 700, 1000])
def test_ddpm_matches_posterior_mean(sched, t):
    rng = np.random.default_rng(t)
    z0, eps = rng.normal(size=16), rng.normal(size=16)
    z_t = forward_noise(z0, t, eps, sched)
    step = ddpm_step(z_t, velocity(z0, eps, t, sched), t, np.zeros(16), sched)
    np.testing.assert_allclose(step, posterior_mean(z0, z_t, t, sched), atol=1e-10)


def test_ddpm_identity_when_clean():
    s = NoiseSchedule.from_betas([0.0, 0.0, 0.3])
    z = np.array([0.5, -2.0])
    np.testing.assert_array_equal(ddpm_step(z, np.zeros(2), 2, np.zeros(2), s), z)


def test_ddpm_rejects_t0(sched):
    with pytest.raises(ScheduleError):
        ddpm_step(np.zeros(2), np.zeros(2), 0, np.zeros(2), sched)


def test_ddim_exact_trajectory(sched):
    rng = np.random.default_rng(7)
    z0, eps = rng.normal(size=(8, 4, 4)), rng.normal(size=(8, 4, 4))
    z = forward_noise(z0, sched.T, eps, sched)
    pairs = ddim_timesteps(sched.T, 10)
    assert len(pairs) == 10 and pairs[0][0] == sched.T and pairs[-1][1] == 0
    for t, t_prev in pairs:
        a, b = sched.coefficients(t)
        # exact model: recover the (z0, eps) pair consistent with z_t
        v = velocity(z0, eps, t, sched)
        z = ddim_step(z, v, t, t_prev, sched)
    np.testing.assert_allclose(z, z0, atol=1e-8)


def test_ddim_endpoint_and_determinism(sched):
    rng = np.random.default_rng(2)
    z, v = rng.normal(size=6), rng.normal(size=6)
    out = ddim_step(z, v, 300, 0, sched)
    np.testing.assert_allclose(out, convert(v, z, 300, "v", "x0", sched), atol=1e-14)
    np.testing.assert_array_equal(ddim_step(z, v, 300, 10, sched), ddim_step(z, v, 300, 10, sched))
    with pytest.raises(ScheduleError):
        ddim_step(z, v, 10, 10, sched)


def test_ddim_timesteps_uniform():
    pairs = ddim_timesteps(1000, 50)
    ts = [t for t, _ in pairs]
    assert ts[0] == 1000 and ts[-1] == 1 and len(ts) == 50
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_csv_dump(sched, tmp_path):
    sched.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "t,beta,alpha_bar,sigma" and len(lines) == 1001


def test_schedule_immutable(sched):
    with pytest.raises(ValueError):
        sched.beta[0] = 0.5
