"""Central finite-difference oracle for checking tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[float]:
    """Relative errors between tape and finite-difference gradients per input.

    ``build`` maps a list of leaf tensors to a scalar loss tensor.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(leaves)
    grads = backward(loss, tape=tape, sources=leaves)
    errors = []
    for leaf, arr in zip(leaves, arrays):
        def fn(leaf=leaf):
            return float(build([Tensor(x.data) for x in leaves]).data)

        numeric = numeric_gradient(fn, leaf.data, h)
        errors.append(relative_error(grads[leaf], numeric))
    return errors
