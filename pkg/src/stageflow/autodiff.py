"""Dense float64 tensors with reverse-mode differentiation.

A Wengert-list tape: every op executed inside a `with tape():` block whose
inputs are tracked appends its result node in construction order (parents
therefore always precede children), and `backward(loss)` walks the list in
reverse, accumulating gradients into every reachable leaf parameter.

All data is float64, C-order. Outside a tape block the same ops run as plain
numpy math with no recording, which is what evaluation/sampling uses.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of op results; topological by construction."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()


def tape() -> Tape:
    return Tape()


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Shape + flat row-major float64 data, optionally on a tape."""

    __slots__ = ("data", "grad", "parents", "_bwd", "tracked", "is_param", "name", "_tape")

    def __init__(
        self,
        data: np.ndarray,
        parents: tuple["Tensor", ...] = (),
        bwd: Callable[[np.ndarray], None] | None = None,
        tracked: bool = False,
        is_param: bool = False,
        name: str | None = None,
    ):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self._bwd = bwd
        self.tracked = tracked
        self.is_param = is_param
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def accumulate(self, g: np.ndarray) -> None:
        # copy on first write: g may be a view into another node's gradient
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.is_param else "tensor")
        return f"Tensor({tag}, shape={self.data.shape})"

    # operator sugar; scalars and ndarrays promote to constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, c):
        return pow_const(self, float(c))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def param(x, name: str | None = None) -> Tensor:
    """Leaf parameter; NaN/Inf rejected at construction."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"parameter {name or ''} contains non-finite values")
    return Tensor(arr, tracked=True, is_param=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable[[np.ndarray], None]) -> Tensor:
    active = _active_tape()
    if active is not None and any(p.tracked for p in parents):
        out = Tensor(data, parents=parents, bwd=bwd, tracked=True)
        out._tape = active
        active.nodes.append(out)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes numpy broadcasting introduced or expanded."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(_unbroadcast(g / b.data, a.shape))
        b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a.accumulate(-g)

    return _make(-a.data, (a,), bwd)


def pow_const(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        a.accumulate(g * c * a.data ** (c - 1.0))

    return _make(a.data ** c, (a,), bwd)


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        a.accumulate(g * out_data)

    return _make(out_data, (a,), bwd)


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        a.accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a.accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a.accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(a.data * sig, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-D and equal-rank stacked operands, or a
    stacked left operand against a 2-D right operand (shared weight)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise DimensionError(f"unsupported matmul ranks: {a.shape} @ {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul stack dims differ: {a.shape} @ {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if ga.shape != a.shape:
            ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
        a.accumulate(ga)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        b.accumulate(gb)

    return _make(a.data @ b.data, (a, b), bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g / count, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg / count, a.shape).copy())

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        a.accumulate(g.transpose(inverse))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _make(a.data[key].copy(), (a,), bwd)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            p.accumulate(g[tuple(index)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; -inf logits get exactly zero probability.

    The row max is subtracted as a detached constant, which leaves the
    gradient exact (shifting logits by a constant does not change softmax).
    """
    rowmax = constant(np.max(x.data, axis=axis, keepdims=True))
    e = texp(sub(x, rowmax))
    return div(e, tsum(e, axis=axis, keepdims=True))


def rms_norm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps) * scale."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    return mul(div(x, tsqrt(add(ms, constant(eps)))), scale)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for every reachable parameter.

    Returns a dict keyed by the leaf parameter tensors; also leaves the
    gradient on each visited tensor's .grad.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not recorded on a tape")
    loss.grad = np.ones_like(loss.data)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(loss._tape.nodes):
        if node.grad is None or node._bwd is None:
            continue
        node._bwd(node.grad)
        for parent in node.parents:
            if parent.is_param and parent.grad is not None:
                leaves[parent] = parent.grad
    return leaves


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
