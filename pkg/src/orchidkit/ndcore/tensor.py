"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient. Outside a tape nothing is recorded, so
inference paths pay no bookkeeping cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class AutodiffError(RuntimeError):
    """Raised for malformed backward requests or non-finite adjoints."""


class Tensor:
    """A float64 array that may participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    kind: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive operations for reverse-mode sweeps.

    Use as a context manager; tapes nest and the innermost one records.
    A tape can be swept several times (e.g. for separate loss heads).
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def gradient(
        self, loss: Tensor, sources: Iterable[Tensor] | None = None
    ) -> dict[Tensor, np.ndarray]:
        return backward(loss, tape=self, sources=sources)


_TAPES: list[Tape] = []


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class no_record:
    """Suspend recording inside an active tape (stop-gradient region)."""

    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)


def _emit(kind: str, value: np.ndarray, inputs: tuple, vjp) -> Tensor:
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(kind, out, tuple(as_tensor(t) for t in inputs), vjp))
    return out


def backward(
    loss: Tensor,
    tape: Tape | None = None,
    sources: Iterable[Tensor] | None = None,
) -> dict[Tensor, np.ndarray]:
    """Sweep ``tape`` in reverse and return d(loss)/d(leaf) for every leaf.

    Leaves are tensors with ``requires_grad`` that were not produced by a
    recorded node. When ``sources`` is given, exactly those tensors are keyed
    in the result; unreached ones receive zeros.
    """
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise AutodiffError("backward needs a tape; run the forward pass inside `with Tape():`")
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    sources = None if sources is None else list(sources)
    # with explicit sources, only nodes downstream of a source need a vjp
    reach: set[int] | None = None
    if sources is not None:
        reach = {id(t) for t in sources}
        for node in tape.nodes:
            if any(id(i) in reach for i in node.inputs):
                reach.add(id(node.out))
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = adjoints.pop(id(node.out), None)
        if g is None or (reach is not None and id(node.out) not in reach):
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad or (reach is not None and id(inp) not in reach):
                continue
            if not np.all(np.isfinite(gi)):
                raise AutodiffError(f"non-finite gradient produced by node kind {node.kind!r}")
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gi
            else:
                adjoints[key] = gi
                leaves[key] = inp
    result: dict[Tensor, np.ndarray] = {}
    if sources is None:
        for key, t in leaves.items():
            if key not in produced and key in adjoints:
                result[t] = adjoints[key]
        if id(loss) in adjoints and loss.requires_grad and id(loss) not in produced:
            result[loss] = adjoints[id(loss)]
        return result
    for t in sources:
        g = adjoints.get(id(t))
        result[t] = g if g is not None else np.zeros_like(t.data)
    return result


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(
        "add",
        av + bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(
        "sub",
        av - bv,
        (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _emit(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av / bv
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Tensor:
    return _emit("neg", -_val(a), (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    av = _val(a)
    return _emit(
        "power",
        av**exponent,
        (a,),
        lambda g: (g * exponent * av ** (exponent - 1),),
    )


def exp(a) -> Tensor:
    out = np.exp(_val(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    av = _val(a)
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    out = np.sqrt(_val(a))
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a) -> Tensor:
    av = _val(a)
    return _emit("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sigmoid(a) -> Tensor:
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def softplus(a) -> Tensor:
    av = _val(a)
    out = np.logaddexp(0.0, av)
    return _emit("softplus", out, (a,), lambda g: (g * _stable_sigmoid(av),))


def silu(a) -> Tensor:
    av = _val(a)
    s = _stable_sigmoid(av)
    return _emit("silu", av * s, (a,), lambda g: (g * (s * (1.0 + av * (1.0 - s))),))


def tanh(a) -> Tensor:
    out = np.tanh(_val(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    av = _val(a)
    mask = av > 0
    return _emit("relu", av * mask, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    av = _val(a)
    mask = (av >= lo) & (av <= hi)
    return _emit("clip", np.clip(av, lo, hi), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    return _emit(
        "sum",
        np.asarray(av.sum(axis=axis, keepdims=keepdims)),
        (a,),
        lambda g: (np.array(_expand_reduced(g, av.shape, axis, keepdims)),),
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _val(a)
    out = np.asarray(av.mean(axis=axis, keepdims=keepdims))
    count = av.size // max(out.size, 1)
    return _emit(
        "mean",
        out,
        (a,),
        lambda g: (np.array(_expand_reduced(g, av.shape, axis, keepdims)) / count,),
    )


def reshape(a, shape) -> Tensor:
    av = _val(a)
    return _emit("reshape", av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    axes = tuple(range(av.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _emit("transpose", av.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    av = _val(a)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def vjp(g):
        full = np.zeros_like(av)
        if basic:  # no repeated positions, plain assignment suffices
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", np.array(av[index]), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(t) for t in tensors]
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit(
        "concat",
        np.concatenate(vals, axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit("matmul", av @ bv, (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    av = _val(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), vjp)
