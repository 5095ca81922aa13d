"""Input checks shared by the estimators."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def check_array(x, ndim: int | tuple[int, ...], name: str = "array") -> np.ndarray:
    """Finite float64 array with the expected rank."""
    arr = np.asarray(x, dtype=np.float64)
    allowed = (ndim,) if isinstance(ndim, int) else ndim
    if arr.ndim not in allowed:
        raise ValueError(f"{name} must have rank {' or '.join(map(str, allowed))}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_unit_range(x: np.ndarray, name: str = "color") -> np.ndarray:
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1], got [{x.min():.4g}, {x.max():.4g}]")
    return x


def check_divisible(height: int, width: int, factor: int, name: str = "input") -> None:
    if height % factor or width % factor:
        raise ValueError(f"{name} extent {height}x{width} is not divisible by the downsample factor {factor}")


def check_same_shape(arrays: Sequence[np.ndarray], names: Sequence[str]) -> None:
    shapes = [np.shape(a) for a in arrays]
    if len(set(shapes)) > 1:
        detail = ", ".join(f"{n}={s}" for n, s in zip(names, shapes))
        raise ValueError(f"spatially incongruent inputs: {detail}")


def check_samples(samples) -> list:
    """Non-empty list of synthdata samples sharing one resolution."""
    from ..synthdata import Sample

    if isinstance(samples, Sample):
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise ValueError("expected at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, Sample):
            raise TypeError(f"item {i} is {type(s).__name__}, expected Sample")
    shapes = {s.shape for s in samples}
    if len(shapes) > 1:
        raise ValueError(f"samples have mixed resolutions {sorted(shapes)}")
    return samples


def check_weight(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative number, got {value}")
    return value
