"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError


@dataclass
class AdamState:
    size: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def _update_inplace(state: AdamState, params: np.ndarray, grads: np.ndarray) -> None:
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    denom = state.v / (1.0 - state.beta2 ** state.t)
    np.sqrt(denom, out=denom)
    denom += state.eps
    step = state.m / (1.0 - state.beta1 ** state.t)
    step /= denom
    step *= state.learning_rate
    params -= step


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Return updated params for one Adam step; ``state`` is advanced in place."""
    params = np.array(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != (state.size,) or grads.shape != (state.size,):
        raise UsageError(
            f"adam_step expects flat arrays of length {state.size}, "
            f"got params {params.shape} and grads {grads.shape}"
        )
    _update_inplace(state, params, grads)
    return params


class Adam:
    """Adam over a dict of named arrays, updated in place.

    Keeps one :class:`AdamState` per parameter so large layers are never
    concatenated into a single flat buffer.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.states = {
            name: AdamState(arr.size, lr, beta1, beta2, eps) for name, arr in params.items()
        }

    @property
    def t(self) -> int:
        return next(iter(self.states.values())).t if self.states else 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, arr in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros(arr.size)
            if not arr.flags.c_contiguous:
                raise UsageError(f"parameter {name!r} must be C-contiguous")
            flat = arr.reshape(-1)
            _update_inplace(self.states[name], flat, np.asarray(g, dtype=np.float64).reshape(-1))
