import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradients
from vstain.optim import Adam, AdamState, adam_step
from vstain.tensor import (
    NonFiniteError,
    Tensor,
    backward,
    concat,
    conv2d,
    default_dtype,
    dense,
    filter2d_valid,
    leaky_relu,
    no_grad,
    pool2,
    relu,
    resize_bilinear_2x,
    sigmoid,
    stack,
    standardize,
)

TOL = 1e-4


# -- forward values -----------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 6))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_allclose(out.data, x, rtol=1e-6)


def test_conv_box_filter_keeps_constants():
    x = Tensor(np.full((1, 6, 6), 2.5))
    out = conv2d(x, Tensor(np.full((1, 1, 3, 3), 1 / 9)))
    np.testing.assert_allclose(out.data, 2.5, rtol=1e-6)


@pytest.mark.parametrize("stride,h,w", [(1, 7, 5), (2, 7, 5), (2, 8, 8), (3, 7, 10)])
def test_conv_same_output_size(stride, h, w):
    out = conv2d(Tensor(np.ones((2, h, w))), Tensor(np.ones((3, 2, 3, 3))), stride=stride)
    assert out.shape == (3, -(-h // stride), -(-w // stride))


def test_conv_valid_and_batched_shapes(rng):
    k = Tensor(rng.normal(size=(4, 2, 3, 3)))
    assert conv2d(Tensor(rng.normal(size=(2, 7, 9))), k, padding="valid").shape == (4, 5, 7)
    assert conv2d(Tensor(rng.normal(size=(3, 2, 8, 8))), k).shape == (3, 4, 8, 8)


def test_conv_rejects_bad_shapes():
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((3, 5, 5))), Tensor(np.ones((1, 2, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 2, 2, 2))))


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 6, 7))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="reflect")
    ref = np.zeros((3, 6, 7))
    for o in range(3):
        for i in range(6):
            for j in range(7):
                ref[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * k[o]) + b[o]
    with default_dtype(np.float64):
        out = conv2d(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_pool_values():
    assert pool2(Tensor(np.full((1, 4, 4), 3.0)), "avg").data.tolist() == [[[3.0, 3.0], [3.0, 3.0]]]
    assert pool2(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), "max").data.tolist() == [[[4.0]]]
    with pytest.raises(ValueError):
        pool2(Tensor(np.ones((1, 3, 4))), "avg")


def test_avg_pool_gradient_is_quarter(rng):
    x = Tensor(rng.normal(size=(2, 4, 6)), requires_grad=True)
    (g,) = backward(pool2(x, "avg").sum(), [x])
    np.testing.assert_allclose(g, 0.25)


def test_max_pool_gradient_goes_to_first_maximum():
    x = Tensor(np.array([[[5.0, 5.0], [5.0, 1.0]]]), requires_grad=True)
    (g,) = backward(pool2(x, "max").sum(), [x])
    assert g.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]


def test_resize_constant_and_ramp():
    c = resize_bilinear_2x(Tensor(np.full((1, 3, 4), 7.0)))
    assert c.shape == (1, 6, 8)
    np.testing.assert_allclose(c.data, 7.0)
    ramp = np.tile(np.arange(5.0), (1, 3, 1))
    out = resize_bilinear_2x(Tensor(ramp)).data
    # corner-aligned: output column j samples input position j * (W - 1) / (2W - 1)
    expected = np.arange(10) * 4 / 9
    np.testing.assert_allclose(out[0, 0], expected, rtol=1e-6)
    np.testing.assert_allclose(np.diff(out[0, 2]), 4 / 9, rtol=1e-5)
    with pytest.raises(ValueError):
        resize_bilinear_2x(Tensor(np.ones((1, 1, 4))))


def test_activations():
    assert sigmoid(Tensor(np.array(0.0))).item() == 0.5
    np.testing.assert_allclose(leaky_relu(Tensor(np.array(-1.0)), 0.1).item(), -0.1, rtol=1e-7)
    assert relu(Tensor(np.array([-2.0, 3.0]))).data.tolist() == [0.0, 3.0]
    x = Tensor(np.array(0.0), requires_grad=True)
    (g,) = backward(sigmoid(x), [x])
    assert g == pytest.approx(0.25)


def test_dense_values():
    out = dense(Tensor(np.array([2.0, 3.0])), Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([0.0])))
    assert out.data.tolist() == [5.0]
    x = np.array([1.5, -2.0, 0.5])
    np.testing.assert_allclose(dense(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_dense_weight_gradient_is_input():
    x = np.array([1.0, -2.0, 4.0])
    w = Tensor(np.zeros((2, 3)), requires_grad=True)
    (g,) = backward(dense(Tensor(x), w, Tensor(np.zeros(2))).sum(), [w])
    np.testing.assert_allclose(g, np.tile(x, (2, 1)))


def test_backward_contract(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    unused = Tensor(rng.normal(size=2), requires_grad=True)
    gx, gu = backward((x * x).sum(), [x, unused])
    np.testing.assert_allclose(gx, 2 * x.data, rtol=1e-6)
    assert not gu.any() and gu.shape == (2,)
    with pytest.raises(ValueError):
        backward(x * 2.0, [x])


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0])) / Tensor(np.array([0.0]))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_default_dtype_scopes():
    assert Tensor(np.ones(2)).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor(np.ones(2)).dtype == np.float64
    assert Tensor(np.ones(2)).dtype == np.float32


# -- finite-difference oracles ------------------------------------------------


def test_grad_conv_reference_case(rng):
    check_gradients(lambda x, k: (conv2d(x, k) ** 2).sum(), [rng.normal(size=(1, 5, 5)),
                                                             rng.normal(size=(1, 1, 3, 3))], TOL)


@pytest.mark.parametrize("stride", [1, 2])
def test_grad_conv_multichannel(rng, stride):
    check_gradients(lambda x, k, b: (conv2d(x, k, b, stride=stride) ** 2).sum(),
                    [rng.normal(size=(2, 2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)], TOL)


def test_grad_conv_valid(rng):
    check_gradients(lambda x, k: (conv2d(x, k, padding="valid") ** 2).sum(),
                    [rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 2, 5, 5))], TOL)


@pytest.mark.parametrize("kind", ["avg", "max"])
def test_grad_pool(rng, kind):
    w = rng.normal(size=(2, 3, 2))
    check_gradients(lambda x: (pool2(x, kind) * Tensor(w)).sum(), [rng.normal(size=(2, 6, 4))], TOL)


def test_grad_resize(rng):
    w = rng.normal(size=(2, 6, 8))
    check_gradients(lambda x: (resize_bilinear_2x(x) * Tensor(w)).sum(), [rng.normal(size=(2, 3, 4))], TOL)


@pytest.mark.parametrize("fn", [lambda x: leaky_relu(x, 0.1), sigmoid, relu, lambda x: x.abs()])
def test_grad_pointwise(rng, fn):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 0.05] += 0.2  # keep away from kinks
    w = rng.normal(size=(4, 5))
    check_gradients(lambda t: (fn(t) * Tensor(w)).sum(), [x], TOL)


def test_grad_arithmetic_and_reductions(rng):
    b = rng.uniform(0.5, 2.0, size=(1, 4))

    def f(x, y):
        z = (x * y + x / Tensor(b) - y) ** 3
        return z.mean(axis=0).sum() + (x.transpose(1, 0).reshape(-1)[::2] ** 2).sum()

    check_gradients(f, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], TOL)


def test_grad_sqrt_power(rng):
    check_gradients(lambda x: (x ** 0.5).sum() + (x ** 1.5).mean(), [rng.uniform(0.5, 2.0, (3, 3))], TOL)


def test_grad_dense(rng):
    check_gradients(lambda x, w, b: (dense(x, w, b) ** 2).sum(),
                    [rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=3)], TOL)


def test_grad_concat_stack_filter(rng):
    k = rng.normal(size=(3, 3))

    def f(a, b):
        c = concat([a, b], axis=0)
        s = stack([a, b], axis=1)
        return (filter2d_valid(c, k) ** 2).sum() + (s * s * s).sum()

    check_gradients(f, [rng.normal(size=(1, 5, 5)), rng.normal(size=(1, 5, 5))], TOL)


def test_grad_standardize(rng):
    w = rng.normal(size=(2, 4, 4))
    check_gradients(lambda x: (standardize(x) * Tensor(w)).sum(), [rng.normal(size=(2, 4, 4))], TOL)


def test_grad_conv_pool_dense_chain(rng):
    def f(x, k, w):
        h = leaky_relu(conv2d(x, k), 0.1)
        h = pool2(h, "avg").mean(axis=(-2, -1))
        return (sigmoid(dense(h, w)) ** 2).sum()

    check_gradients(f, [rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3)),
                        rng.normal(size=(2, 3))], TOL)


# -- properties ---------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(h=st.integers(2, 9), w=st.integers(2, 9), c=st.floats(-5, 5))
def test_resize_preserves_constants(h, w, c):
    out = resize_bilinear_2x(Tensor(np.full((1, h, w), c)))
    assert out.shape == (1, 2 * h, 2 * w)
    np.testing.assert_allclose(out.data, c, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_conv_deterministic(seed):
    r = np.random.default_rng(seed)
    x, k = r.normal(size=(2, 6, 6)), r.normal(size=(2, 2, 3, 3))
    a = conv2d(Tensor(x), Tensor(k)).data
    b = conv2d(Tensor(x), Tensor(k)).data
    assert np.array_equal(a, b)


# -- Adam ---------------------------------------------------------------------


def _param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_adam_zero_gradient_keeps_parameters():
    p = [_param([1.0, -2.0])]
    st_ = AdamState.zeros_like(p)
    adam_step(p, [np.zeros(2)], st_, lr=0.1)
    assert p[0].data.tolist() == [1.0, -2.0] and st_.t == 1


def test_adam_first_step_is_sign_step():
    p = [_param([0.0, 0.0, 0.0])]
    g = np.array([0.3, -5.0, 1e-3])
    st_ = AdamState.zeros_like(p, epsilon=1e-12)
    adam_step(p, [g], st_, lr=0.01)
    np.testing.assert_allclose(p[0].data, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_reversed_gradient_shrinks_step():
    p = [_param([0.0])]
    st_ = AdamState.zeros_like(p)
    adam_step(p, [np.array([1.0])], st_, lr=0.1)
    before = p[0].data.copy()
    adam_step(p, [np.array([-1.0])], st_, lr=0.1)
    assert st_.v[0][0] > 0
    assert abs(p[0].data[0] - before[0]) < 0.1
    assert st_.t == 2


def test_adam_validates_inputs():
    p = [_param([0.0, 0.0])]
    st_ = AdamState.zeros_like(p)
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], st_, lr=0.1)
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(2)], st_, lr=0.0)
    assert st_.t == 0


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(300):
        backward((x * x).sum(), [x])
        opt.step()
    assert np.abs(x.data).max() < 0.05
