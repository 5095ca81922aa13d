"""Fast built-in property checks behind the ``selftest`` command."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import ndcore
from .geometry import MetricDepth, preprocess_depth
from .ldm import guided_velocity
from .metrics import latent_pca_redundancy
from .ndcore.gradcheck import check_gradients
from .schedule import build_schedule, convert, ddim_step, ddim_timesteps, forward_noise, velocity
from .synthdata import decode_sample, encode_sample, generate_samples


def _gradients() -> str:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    errs = check_gradients(lambda t: (ndcore.functional.conv2d(t[0], t[1], t[2], padding=1) ** 2).sum(), [x, w, b])
    err = max(errs)
    assert err < 1e-6, err
    return f"conv2d max rel err {err:.1e}"


def _preprocess() -> str:
    out = preprocess_depth(MetricDepth(np.array([[1.0, 2.0, 4.0]])))
    assert np.array_equal(out.values, np.array([[3.0, 1.0, 0.0]])), out.values
    d = np.random.default_rng(1).uniform(0.5, 10.0, (6, 6))
    dev = np.abs(preprocess_depth(MetricDepth(7.5 * d)).values - preprocess_depth(MetricDepth(d)).values).max()
    assert dev <= 1e-12, dev
    return f"scale deviation {dev:.1e}"


def _schedule() -> str:
    sched = build_schedule()
    assert np.all(np.diff(sched.alpha_bar) < 0) and sched.alpha_bar[-1] <= 1e-12
    rng = np.random.default_rng(2)
    z0, eps = rng.standard_normal((2, 8, 4, 4))
    z = forward_noise(z0, sched.T, eps, sched)
    for t, t_prev in ddim_timesteps(sched.T, 10):
        z = ddim_step(z, velocity(z0, eps, t, sched), t, t_prev, sched)
    err = np.abs(z - z0).max()
    assert err <= 1e-8, err
    z_t = forward_noise(z0, 300, eps, sched)
    back = convert(convert(eps, z_t, 300, "epsilon", "v", sched), z_t, 300, "v", "x0", sched)
    assert np.abs(back - z0).max() <= 1e-10
    return f"DDIM oracle err {err:.1e}"


def _guidance() -> str:
    rng = np.random.default_rng(3)
    vu, vc = rng.standard_normal((2, 8, 4, 4))
    assert guided_velocity(vu, vc, 1.0) is vc and guided_velocity(vu, vc, 0.0) is vu
    a, b, c = (guided_velocity(vu, vc, w) for w in (0.5, 2.0, 3.5))
    assert np.allclose((b - a) / 1.5, (c - b) / 1.5, atol=1e-12)
    return "w=0, w=1 exact; affine in w"


def _pca() -> str:
    rng = np.random.default_rng(4)
    base = rng.standard_normal((16, 4, 4, 4))
    dup = np.concatenate([base, base], axis=1)
    k_dup = latent_pca_redundancy(dup, 0.95)
    k_iso = latent_pca_redundancy(rng.standard_normal((400, 16, 4, 4)), 0.95)
    assert k_dup <= 4 and k_iso in (15, 16), (k_dup, k_iso)
    return f"duplicated k={k_dup}, isotropic k={k_iso}"


def _container() -> str:
    s = generate_samples(1, seed=5, height=16, width=16)[0]
    assert decode_sample(encode_sample(s)) == s
    return "bit-exact round trip"


CHECKS: dict[str, Callable[[], str]] = {
    "gradients": _gradients,
    "preprocessing": _preprocess,
    "schedule": _schedule,
    "guidance": _guidance,
    "pca-redundancy": _pca,
    "container": _container,
}


def run_selftest() -> list[dict]:
    rows = []
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            detail, ok = check(), True
        except Exception as err:  # report every failure instead of stopping
            detail, ok = f"{type(err).__name__}: {err}", False
        rows.append({"check": name, "passed": ok, "seconds": round(time.perf_counter() - start, 3), "detail": detail})
    return rows


def format_table(rows: list[dict]) -> str:
    width = max(len(r["check"]) for r in rows)
    lines = [f"{'check'.ljust(width)}  result  detail"]
    lines += [f"{r['check'].ljust(width)}  {'PASS' if r['passed'] else 'FAIL'}    {r['detail']}" for r in rows]
    return "\n".join(lines)
