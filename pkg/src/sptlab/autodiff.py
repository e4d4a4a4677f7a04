"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded on it
whenever one of their inputs requires a gradient. ``tape.backward(root)``
then replays the records in reverse and accumulates ``dRoot/dLeaf`` into
the ``grad`` field of every leaf tensor that requires a gradient.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w, w))
    >>> tape.backward(loss)
    >>> w.grad
    array([4.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DimensionError, DomainError, UsageError, ValidationError

POWER_GRAD_FLOOR = 1e-6

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "sptlab_active_tape", default=None
)


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


@dataclass(frozen=True)
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager to make it the active tape for the current
    context. Tapes are not shared between threads.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, root: Tensor) -> None:
        backward(self, root)


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    produced = {id(rec.output) for rec in tape.records}
    if id(root) not in produced:
        if root.requires_grad:
            _accumulate_leaf(root, np.ones_like(root.data))
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                prev = grads.get(id(inp))
                grads[id(inp)] = g if prev is None else prev + g
            else:
                _accumulate_leaf(inp, g)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.records.append(_Record(inputs, out, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise and structural ops -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record(
        np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tensors, grad_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def power(a: Tensor, gamma: float) -> Tensor:
    """Elementwise ``x ** gamma`` on [0, 1], with ``0 ** 0 == 1``.

    The derivative for ``gamma < 1`` is evaluated at ``max(x, 1e-6)`` so the
    singularity at zero stays finite.
    """
    gamma = float(gamma)
    if gamma < 0:
        raise DomainError(f"power exponent must be >= 0, got {gamma}")
    x = a.data
    if x.size and (np.nanmin(x) < 0.0 or np.nanmax(x) > 1.0 or np.isnan(x).any()):
        raise DomainError("power expects inputs in [0, 1]")
    out = np.power(x, gamma)

    def grad_fn(g):
        if gamma == 0.0:
            return (np.zeros_like(x),)
        base = np.maximum(x, POWER_GRAD_FLOOR) if gamma < 1.0 else x
        return (g * gamma * np.power(base, gamma - 1.0),)

    return _record(out, (a,), grad_fn)


# --- network layers -------------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x of shape (N, D) and weight (D, M)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"affine expects 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"affine inner dimensions differ: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data

    def grad_fn(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record(xd @ wd + bias.data, (x, weight, bias), grad_fn)


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of an NCHW batch with an (F, C, kh, kw) kernel.

    ``padding="same"`` zero-pads so that ``H' = ceil(H / stride)``; for even
    kernels the extra row/column goes on the bottom/right.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input and FCkk kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({f},)")
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1")
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise UsageError(f"unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else np.ascontiguousarray(xd)
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(f, -1)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    keep_cols = cols if kernel.requires_grad else None
    del cols

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gk = (gmat.T @ keep_cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gmat.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxp = kernels.col2im(np.ascontiguousarray(gmat @ wmat), n, c, hp, wp, kh, kw, stride)
            gx = dxp[:, :, pt:pt + h, pl:pl + w]
        return gx, gk, gb

    return _record(np.ascontiguousarray(out), (x, kernel, bias), grad_fn)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; ragged right/bottom edges behave as if padded with -inf."""
    stride = window if stride is None else stride
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    h, w = x.shape[2:]
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    out, argidx = kernels.maxpool_forward(np.ascontiguousarray(x.data), window, stride)
    return _record(
        out,
        (x,),
        lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), argidx, h, w),),
    )


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(a: Tensor) -> Tensor:
    p = np.exp(log_softmax(a.data))

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (a,), grad_fn)


def softmax_cross_entropy(logits: Tensor, onehot) -> Tensor:
    """Batch-mean cross-entropy between softmax(logits) and one-hot targets."""
    y = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=np.float64)
    if logits.data.ndim != 2 or y.shape != logits.shape:
        raise DimensionError(f"logits {logits.shape} and targets {y.shape} must both be (N, K)")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1.0).all()):
        raise ValidationError("targets must be one-hot rows")
    logp = log_softmax(logits.data)
    n = logits.shape[0]
    loss = -(y * logp).sum() / n

    def grad_fn(g):
        return (g * (np.exp(logp) - y) / n,)

    return _record(np.array(loss), (logits,), grad_fn)
