from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np


@dataclass
class Adam:
    """Adaptive-moment optimizer over flat parameter dictionaries (in place)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        names: Iterable[str] | None = None,
        lr: float | None = None,
    ) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name in names if names is not None else grads.keys():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ema_update(shadow: dict[str, np.ndarray], source: Mapping[str, np.ndarray], decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * source, key by key."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    for name, value in source.items():
        s = shadow[name]
        if s.shape != value.shape:
            raise ValueError(f"EMA shadow {name!r} has shape {s.shape}, source {value.shape}")
        s *= decay
        s += (1.0 - decay) * value


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
