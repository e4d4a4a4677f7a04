import math

import numpy as np
import pytest

from sptlab.errors import UsageError
from sptlab.optim import Adam, AdamState, adam_step


def scripted_adam(grad_fn, w0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, kept deliberately separate from the package code."""
    w, m, v = w0, 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (math.sqrt(vh) + eps)
    return w


def test_first_step_is_signed_lr():
    state = AdamState(3, learning_rate=0.01)
    g = np.array([2.5, -0.3, 1e-3])
    out = adam_step(state, np.zeros(3), g)
    np.testing.assert_allclose(out, -0.01 * np.sign(g), rtol=1e-4)
    assert state.t == 1


def test_zero_gradient_is_fixed_point():
    state = AdamState(2)
    p = np.array([1.0, -2.0])
    out = adam_step(state, p, np.zeros(2))
    np.testing.assert_array_equal(out, p)
    assert state.t == 1


def test_quadratic_matches_scripted_reference():
    state = AdamState(1, learning_rate=0.1)
    w = np.zeros(1)
    for _ in range(500):
        w = adam_step(state, w, 2 * (w - 3.0))
    expected = scripted_adam(lambda x: 2 * (x - 3.0), 0.0, 0.1, 500)
    assert abs(w[0] - 3.0) < 0.05
    assert w[0] == pytest.approx(expected, rel=1e-12)
    assert state.t == 500


def test_length_mismatch():
    with pytest.raises(UsageError):
        adam_step(AdamState(2), np.zeros(3), np.zeros(3))
    with pytest.raises(UsageError):
        adam_step(AdamState(2), np.zeros(2), np.zeros(3))


def test_moment_shapes():
    s = AdamState(5)
    assert s.m.shape == (5,) and s.v.shape == (5,)


def test_dict_optimizer_matches_flat(rng):
    params = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)}
    flat_state = {k: AdamState(v.size, 1e-2) for k, v in params.items()}
    flat = {k: v.reshape(-1).copy() for k, v in params.items()}
    opt = Adam(params, lr=1e-2)
    for _ in range(5):
        grads = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        opt.step(grads)
        for k in flat:
            flat[k] = adam_step(flat_state[k], flat[k], grads[k].reshape(-1))
    for k in params:
        np.testing.assert_array_equal(params[k].reshape(-1), flat[k])
    assert opt.t == 5
