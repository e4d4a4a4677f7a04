import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sptlab import autodiff as ad
from sptlab.errors import DimensionError, DomainError, UsageError, ValidationError

from conftest import fd_grad, rel_err


def grad_of(build, x):
    """Analytic gradient of scalar build(Tensor) with respect to x."""
    t = ad.Tensor(x, requires_grad=True)
    with ad.Tape() as tape:
        out = build(t)
    tape.backward(out)
    return t.grad


def value_of(build):
    return lambda arr: build(ad.Tensor(arr)).item()


def weighted_sum(rng, shape):
    """A random linear read-out, so every output element contributes to the scalar."""
    c = rng.standard_normal(shape)
    return lambda t: ad.sum_(ad.mul(t, c))


# --- conv2d ----------------------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = ad.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ad.conv2d(x, ad.Tensor(np.ones((1, 1, 1, 1))), ad.Tensor([0.0]), 1, "valid")
    np.testing.assert_array_equal(out.data, [[[[1, 2], [3, 4]]]])


def test_conv2d_window_sum():
    x = ad.Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, ad.Tensor(np.ones((1, 1, 3, 3))), ad.Tensor([0.0]), 1, "valid")
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


def test_conv2d_against_direct_loops(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), 1, "same").data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for f in range(4):
            for i in range(6):
                for j in range(5):
                    ref[n, f, i, j] = (xp[n, :, i:i + 3, j:j + 3] * k[f]).sum() + b[f]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_same_even_kernel_pads_bottom_right(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    k = rng.standard_normal((1, 1, 4, 4))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor([0.0]), 1, "same").data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 2), (1, 2)))
    assert out.shape == (1, 1, 5, 5)
    assert out[0, 0, 0, 0] == pytest.approx((xp[0, 0, :4, :4] * k[0, 0]).sum(), abs=1e-12)


def test_conv2d_same_stride1_preserves_size(rng):
    out = ad.conv2d(ad.Tensor(rng.random((2, 1, 28, 28))), ad.Tensor(rng.random((8, 1, 5, 5))),
                    ad.Tensor(np.zeros(8)))
    assert out.shape == (2, 8, 28, 28)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 3, 3, 3))), ad.Tensor([0.0]))


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        ad.conv2d(ad.Tensor(np.zeros((1, 1, 2, 2))), ad.Tensor(np.zeros((1, 1, 3, 3))), ad.Tensor([0.0]),
                  1, "valid")


def test_conv2d_input_gradient_5x5(rng):
    x = rng.standard_normal((1, 1, 5, 5))
    k = rng.standard_normal((1, 1, 3, 3))
    read = weighted_sum(rng, (1, 1, 5, 5))
    build = lambda t: read(ad.conv2d(t, ad.Tensor(k), ad.Tensor([0.3]), 1, "same"))  # noqa: E731
    assert rel_err(grad_of(build, x), fd_grad(value_of(build), x)) < 1e-6


@pytest.mark.parametrize("padding,stride", [("same", 1), ("valid", 1), ("same", 2), ("valid", 2)])
def test_conv2d_all_gradients(rng, padding, stride):
    x = rng.standard_normal((2, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    probe = ad.conv2d(ad.Tensor(x), ad.Tensor(k), ad.Tensor(b), stride, padding)
    read = weighted_sum(rng, probe.shape)
    bx = lambda t: read(ad.conv2d(t, ad.Tensor(k), ad.Tensor(b), stride, padding))  # noqa: E731
    bk = lambda t: read(ad.conv2d(ad.Tensor(x), t, ad.Tensor(b), stride, padding))  # noqa: E731
    bb = lambda t: read(ad.conv2d(ad.Tensor(x), ad.Tensor(k), t, stride, padding))  # noqa: E731
    assert rel_err(grad_of(bx, x), fd_grad(value_of(bx), x)) < 1e-6
    assert rel_err(grad_of(bk, k), fd_grad(value_of(bk), k)) < 1e-6
    assert rel_err(grad_of(bb, b), fd_grad(value_of(bb), b)) < 1e-6


# --- maxpool2d -------------------------------------------------------------------------

def test_maxpool_single_window():
    out = ad.maxpool2d(ad.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])


def test_maxpool_constant():
    out = ad.maxpool2d(ad.Tensor(np.full((2, 3, 6, 6), 0.7)), 2)
    assert out.shape == (2, 3, 3, 3)
    assert (out.data == 0.7).all()


def test_maxpool_ragged_edge_acts_like_neg_inf_padding():
    x = np.arange(25, dtype=float).reshape(1, 1, 5, 5) * -1.0
    out = ad.maxpool2d(ad.Tensor(x), 2).data
    assert out.shape == (1, 1, 3, 3)
    assert out[0, 0, 2, 2] == -24.0
    assert out[0, 0, 0, 2] == -4.0


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        ad.maxpool2d(ad.Tensor(np.zeros((1, 1, 2, 2))), 3)


def test_maxpool_gradient_random_4x4(rng):
    x = rng.permutation(16).reshape(1, 1, 4, 4) + rng.random((1, 1, 4, 4)) * 0.1
    read = weighted_sum(rng, (1, 1, 2, 2))
    build = lambda t: read(ad.maxpool2d(t, 2))  # noqa: E731
    assert rel_err(grad_of(build, x), fd_grad(value_of(build), x)) < 1e-6


def test_maxpool_tie_routes_to_first_element():
    x = np.ones((1, 1, 2, 2))
    g = grad_of(lambda t: ad.sum_(ad.maxpool2d(t, 2)), x)
    np.testing.assert_array_equal(g, [[[[1.0, 0.0], [0.0, 0.0]]]])


# --- affine ----------------------------------------------------------------------------

def test_affine_identity(rng):
    x = rng.standard_normal((4, 3))
    out = ad.affine(ad.Tensor(x), ad.Tensor(np.eye(3)), ad.Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_affine_constant(rng):
    b = np.array([1.0, -2.0])
    out = ad.affine(ad.Tensor(rng.standard_normal((3, 4))), ad.Tensor(np.zeros((4, 2))), ad.Tensor(b))
    np.testing.assert_array_equal(out.data, np.tile(b, (3, 1)))


def test_affine_gradients(rng):
    x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    read = weighted_sum(rng, (2, 2))
    for which, arr in (("x", x), ("w", w), ("b", b)):
        def build(t, which=which):
            args = {"x": ad.Tensor(x), "w": ad.Tensor(w), "b": ad.Tensor(b)}
            args[which] = t
            return read(ad.affine(args["x"], args["w"], args["b"]))
        assert rel_err(grad_of(build, arr), fd_grad(value_of(build), arr)) < 1e-6


def test_affine_inner_mismatch():
    with pytest.raises(DimensionError):
        ad.affine(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 2))), ad.Tensor(np.zeros(2)))


# --- elementwise -----------------------------------------------------------------------

def test_sigmoid_zero():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5


def test_sigmoid_extremes_are_finite():
    out = ad.sigmoid(ad.Tensor([-1000.0, 1000.0])).data
    assert np.isfinite(out).all()
    assert out[0] == 0.0 and out[1] == 1.0


def test_power_endpoints():
    np.testing.assert_array_equal(ad.power(ad.Tensor([0.0, 1.0]), 25.0).data, [0.0, 1.0])


def test_power_zero_exponent_is_one_everywhere():
    np.testing.assert_array_equal(ad.power(ad.Tensor([0.0, 0.3, 1.0]), 0.0).data, [1.0, 1.0, 1.0])


def test_power_small_exponent_matches_exp_log():
    expected = math.exp(0.04 * math.log(0.5))
    assert ad.power(ad.Tensor(0.5), 0.04).item() == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.9727, abs=5e-5)


def test_power_domain():
    with pytest.raises(DomainError):
        ad.power(ad.Tensor([1.2]), 2.0)
    with pytest.raises(DomainError):
        ad.power(ad.Tensor([-0.1]), 2.0)


def test_power_gradient_at_zero_is_finite():
    for gamma in (0.04, 0.5, 0.67):
        g = grad_of(lambda t: ad.sum_(ad.power(t, gamma)), np.array([0.0, 0.25]))
        assert np.isfinite(g).all()
        assert g[0] == pytest.approx(gamma * 1e-6 ** (gamma - 1.0))


@pytest.mark.parametrize("op", ["relu", "sigmoid"])
def test_activation_gradients(rng, op):
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 1e-2] = 0.5
    fn = getattr(ad, op)
    read = weighted_sum(rng, x.shape)
    build = lambda t: read(fn(t))  # noqa: E731
    assert rel_err(grad_of(build, x), fd_grad(value_of(build), x)) < 1e-6


@pytest.mark.parametrize("gamma", [0.04, 0.4, 1.0, 2.5, 25.0])
def test_power_gradient(rng, gamma):
    x = rng.uniform(0.05, 0.95, (3, 3))
    read = weighted_sum(rng, x.shape)
    build = lambda t: read(ad.power(t, gamma))  # noqa: E731
    assert rel_err(grad_of(build, x), fd_grad(value_of(build), x, h=1e-6)) < 1e-6


# --- softmax cross-entropy -------------------------------------------------------------

def test_ce_uniform_logits():
    loss = ad.softmax_cross_entropy(ad.Tensor(np.zeros((1, 10))), np.eye(10)[[3]])
    assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
    assert loss.item() == pytest.approx(2.302585, abs=1e-6)


def test_ce_saturated_correct():
    logits = np.zeros((1, 10))
    logits[0, 4] = 1000.0
    loss = ad.softmax_cross_entropy(ad.Tensor(logits), np.eye(10)[[4]])
    assert loss.item() == pytest.approx(0.0, abs=1e-300)


def test_ce_gradient_random(rng):
    logits = rng.standard_normal((3, 10)) * 3
    y = np.eye(10)[rng.integers(0, 10, 3)]
    build = lambda t: ad.softmax_cross_entropy(t, y)  # noqa: E731
    assert rel_err(grad_of(build, logits), fd_grad(value_of(build), logits)) < 1e-5


def test_ce_rejects_non_onehot():
    with pytest.raises(ValidationError):
        ad.softmax_cross_entropy(ad.Tensor(np.zeros((1, 3))), np.array([[0.5, 0.5, 0.0]]))
    with pytest.raises(ValidationError):
        ad.softmax_cross_entropy(ad.Tensor(np.zeros((1, 3))), np.array([[1.0, 1.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 12)),
                  elements=st.floats(-500, 500)))
def test_softmax_rows_sum_to_one(logits):
    p = ad.softmax(ad.Tensor(logits)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)


# --- backward --------------------------------------------------------------------------

def test_backward_root_is_leaf():
    x = ad.Tensor(np.array(3.0), requires_grad=True)
    with ad.Tape() as tape:
        pass
    tape.backward(x)
    assert x.grad == 1.0


def test_backward_linearity():
    a = ad.Tensor(np.array(1.5), requires_grad=True)
    b = ad.Tensor(np.array(-2.0), requires_grad=True)
    with ad.Tape() as tape:
        root = ad.add(a, b)
    tape.backward(root)
    assert a.grad == 1.0 and b.grad == 1.0


def test_backward_fan_out_accumulates():
    a = ad.Tensor(np.array(2.0), requires_grad=True)
    with ad.Tape() as tape:
        root = ad.add(ad.mul(a, a), a)
    tape.backward(root)
    assert a.grad == 5.0


def test_backward_non_scalar_root():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        out = ad.relu(a)
    with pytest.raises(UsageError):
        tape.backward(out)


def test_backward_twice_accumulates_and_is_deterministic(rng):
    x = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(ad.affine(x, w, ad.Tensor(np.zeros(4))), np.eye(4)[[0, 2]])
    tape.backward(loss)
    first = w.grad.copy()
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * first)
    w.zero_grad()
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, first)


def test_each_record_visited_once(rng):
    x = ad.Tensor(rng.standard_normal(5), requires_grad=True)
    calls = []
    with ad.Tape() as tape:
        y = ad.relu(x)
        z = ad.sum_(y)
    original = tape.records[0].backward
    tape.records[0] = tape.records[0].__class__(
        tape.records[0].inputs, tape.records[0].output,
        lambda g: calls.append(1) or original(g))
    tape.backward(z)
    assert len(calls) == 1


def test_ops_outside_tape_do_not_record():
    a = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        pass
    ad.relu(a)
    assert len(tape) == 0


def test_full_cp_parameter_gradients(rng):
    """Sampled coordinates of every C_p parameter against finite differences."""
    from sptlab.models import build

    model = build("C_p", seed=7)
    x = rng.random((2, 1, 28, 28))
    y = np.eye(10)[[1, 7]]
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    with ad.Tape() as tape:
        loss = ad.softmax_cross_entropy(model.logits(ad.Tensor(x), tensors), y)
    tape.backward(loss)
    for name, arr in model.params.items():
        coords = rng.choice(arr.size, size=min(6, arr.size), replace=False)

        def f(a, name=name):
            p = {k: ad.Tensor(a if k == name else v) for k, v in model.params.items()}
            return ad.softmax_cross_entropy(model.logits(ad.Tensor(x), p), y).item()

        num = fd_grad(f, arr, coords=coords).reshape(-1)[coords]
        ana = tensors[name].grad.reshape(-1)[coords]
        assert rel_err(ana, num) < 1e-4, name
