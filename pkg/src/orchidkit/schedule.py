"""Discrete diffusion schedules, parametrization conversions and samplers.

Steps are 1-based: ``t = 1..T``. ``alpha_bar_at(0)`` is 1 (clean data). The
model output is canonically a velocity ``v = a * eps - b * x0`` with
``a = sqrt(alpha_bar_t)`` and ``b = sqrt(1 - alpha_bar_t)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PARAMETRIZATIONS = ("epsilon", "x0", "v")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ScheduleError("betas must be a non-empty 1-d array")
        if np.any(beta < 0) or np.any(beta > 1):
            raise ScheduleError("betas must lie in [0, 1]")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
        sigma = np.nan_to_num(sigma)
        for arr in (beta, alpha, alpha_bar, sigma):
            arr.setflags(write=False)
        return cls(beta, alpha, alpha_bar, sigma)

    def alpha_bar_at(self, t: int) -> float:
        self.check_step(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def coefficients(self, t: int) -> tuple[float, float]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))."""
        ab = self.alpha_bar_at(t)
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))

    def check_step(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not (isinstance(t, (int, np.integer)) and lo <= t <= self.T):
            raise ScheduleError(f"diffusion step {t!r} outside [{lo}, {self.T}]")

    @property
    def terminal_snr(self) -> float:
        ab = float(self.alpha_bar[-1])
        return ab / (1.0 - ab) if ab < 1.0 else np.inf

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "beta", "alpha_bar", "sigma"])
            for t in range(1, self.T + 1):
                writer.writerow([t, repr(self.beta[t - 1]), repr(self.alpha_bar[t - 1]), repr(self.sigma[t - 1])])


def rescale_zero_terminal_snr(alpha_bar: np.ndarray) -> np.ndarray:
    """Affinely map sqrt(alpha_bar) so the last entry is 0 and the first is unchanged."""
    root = np.sqrt(alpha_bar)
    first, last = root[0], root[-1]
    root = (root - last) * first / (first - last)
    return root**2


def build_schedule(
    T: int = 1000,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    zero_terminal_snr: bool = True,
) -> NoiseSchedule:
    """Scaled-linear DDPM schedule, optionally rescaled to zero terminal SNR."""
    if T < 2:
        raise ScheduleError(f"need at least 2 diffusion steps, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T) ** 2
    if not zero_terminal_snr:
        return NoiseSchedule.from_betas(beta)
    alpha_bar = rescale_zero_terminal_snr(np.cumprod(1.0 - beta))
    alpha = np.concatenate([[alpha_bar[0]], alpha_bar[1:] / alpha_bar[:-1]])
    return NoiseSchedule.from_betas(1.0 - alpha)


def _check_shapes(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ScheduleError(f"shape mismatch: {sorted(shapes)}")


def forward_noise(z0, t: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """Sample of q(z_t | z_0) for the given noise draw (t = 0 returns z0)."""
    z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    _check_shapes(z0, eps)
    a, b = sched.coefficients(t)
    return a * z0 + b * eps


def velocity(z0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    a, b = sched.coefficients(t)
    return a * np.asarray(eps) - b * np.asarray(z0)


def convert(pred, z_t, t: int, source: str, target: str, sched: NoiseSchedule) -> np.ndarray:
    """Re-express a model prediction between the epsilon, x0 and v parametrizations."""
    if source not in PARAMETRIZATIONS or target not in PARAMETRIZATIONS:
        raise ScheduleError(f"parametrizations must be among {PARAMETRIZATIONS}")
    if source == target:
        raise ScheduleError("convert needs distinct source and target parametrizations")
    pred, z_t = np.asarray(pred, dtype=np.float64), np.asarray(z_t, dtype=np.float64)
    _check_shapes(pred, z_t)
    sched.check_step(t)
    a, b = sched.coefficients(t)
    if source == "v":
        v = pred
    elif source == "epsilon":
        if a == 0.0:
            raise ScheduleError(f"epsilon does not determine v at step {t} (alpha_bar = 0)")
        v = (pred - b * z_t) / a
    else:
        if b == 0.0:
            raise ScheduleError(f"x0 does not determine v at step {t} (alpha_bar = 1)")
        v = (a * z_t - pred) / b
    if target == "v":
        return v
    if target == "x0":
        return a * z_t - b * v
    return b * z_t + a * v


def ddpm_step(z_t, v_pred, t: int, eta_noise, sched: NoiseSchedule) -> np.ndarray:
    """Ancestral step z_t -> z_{t-1} from a velocity prediction.

    Uses the epsilon-form update ``(z_t - beta_t / sqrt(1 - abar_t) * eps) /
    sqrt(alpha_t) + sigma_t * eta``. When ``alpha_t == 0`` (the terminal step of
    a zero-SNR schedule) that form is 0/0 and the equal posterior mean
    ``sqrt(abar_{t-1}) * x0`` is used instead. The noise is dropped at t = 1.
    """
    if t == 0:
        raise ScheduleError("ddpm_step is undefined at t = 0")
    sched.check_step(t)
    z_t, v_pred = np.asarray(z_t, dtype=np.float64), np.asarray(v_pred, dtype=np.float64)
    _check_shapes(z_t, v_pred)
    alpha_t = float(sched.alpha[t - 1])
    beta_t = float(sched.beta[t - 1])
    a, b = sched.coefficients(t)
    if beta_t == 0.0:
        mean = z_t.copy()
    elif alpha_t > 0.0:
        eps = b * z_t + a * v_pred
        mean = (z_t - beta_t / b * eps) / np.sqrt(alpha_t)
    else:
        mean = np.sqrt(sched.alpha_bar_at(t - 1)) * (a * z_t - b * v_pred)
    if t == 1:
        return mean
    eta_noise = np.asarray(eta_noise, dtype=np.float64)
    _check_shapes(z_t, eta_noise)
    return mean + float(sched.sigma[t - 1]) * eta_noise


def posterior_mean(z0, z_t, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Mean of q(z_{t-1} | z_t, z_0)."""
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    beta_t = float(sched.beta[t - 1])
    alpha_t = float(sched.alpha[t - 1])
    c0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = np.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * np.asarray(z0) + ct * np.asarray(z_t)


def ddim_step(z_t, v_pred, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from step t to an earlier step t_prev."""
    if not (0 <= t_prev < t):
        raise ScheduleError(f"ddim_step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    sched.check_step(t)
    z_t, v_pred = np.asarray(z_t, dtype=np.float64), np.asarray(v_pred, dtype=np.float64)
    _check_shapes(z_t, v_pred)
    a, b = sched.coefficients(t)
    x0 = a * z_t - b * v_pred
    eps = b * z_t + a * v_pred
    a_prev, b_prev = sched.coefficients(t_prev)
    return a_prev * x0 + b_prev * eps


def ddim_timesteps(T: int, steps: int) -> list[tuple[int, int]]:
    """(t, t_prev) pairs: uniform stride over [1, T] including T, ending at t_prev = 0."""
    if steps < 1:
        raise ScheduleError("need at least one sampling step")
    steps = min(steps, T)
    ts = sorted({int(round(x)) for x in np.linspace(1, T, steps)}, reverse=True)
    return list(zip(ts, ts[1:] + [0]))


def respace(sched: NoiseSchedule, timesteps) -> NoiseSchedule:
    """Schedule over an increasing subsequence of steps, keeping their alpha_bar values.

    Index ``i`` of the result (1-based) corresponds to step ``timesteps[i-1]``
    of ``sched``; ancestral steps on it skip the steps in between.
    """
    ts = [int(t) for t in timesteps]
    if not ts or any(b <= a for a, b in zip(ts, ts[1:])):
        raise ScheduleError("respace needs a non-empty increasing step sequence")
    for t in ts:
        sched.check_step(t)
    alpha_bar = np.array([sched.alpha_bar_at(t) for t in ts])
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    return NoiseSchedule.from_betas(np.clip(1.0 - alpha_bar / prev, 0.0, 1.0))
