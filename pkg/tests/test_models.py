import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradients
from vstain.models import (
    build_discriminator,
    build_dr_generator,
    build_from_config,
    build_vs_generator,
    forward_generator,
    tap_disc_features,
    tap_vs_features,
)
from vstain.tensor import Tensor, backward, default_dtype, no_grad


@pytest.fixture(scope="module")
def vs():
    return build_vs_generator(8, seed=3)


@pytest.fixture(scope="module")
def dr():
    return build_dr_generator(8, seed=3)


def test_vs_generator_shapes(vs, rng):
    x = Tensor(rng.normal(size=(2, 64, 64)))
    with no_grad():
        assert forward_generator(vs, x).shape == (3, 64, 64)
    assert vs.level_widths() == [8, 16, 32, 64]
    assert vs.pool_kind == "avg" and vs.levels == 4 and vs.convs_per_block == 3


def test_vs_generator_seed_determinism():
    a, b = build_vs_generator(8, seed=11), build_vs_generator(8, seed=11)
    assert a.parameter_hash() == b.parameter_hash()
    assert a.n_parameters() == b.n_parameters()
    assert build_vs_generator(8, seed=12).parameter_hash() != a.parameter_hash()


def test_dr_generator_structure(dr, rng):
    with no_grad():
        assert dr(Tensor(rng.normal(size=(2, 64, 64)))).shape == (2, 64, 64)
        out = dr(Tensor(np.zeros((2, 64, 64)) + 1e-3 * rng.normal(size=(2, 64, 64))))
    assert np.isfinite(out.data).all()
    assert dr.pool_kind == "max" and dr.levels == 5 and dr.convs_per_block == 2
    # one skip concatenation (and one decoder block) per level
    assert len(dr.decoder_widths()) == 5
    assert sum(1 for k in dr.params if k.startswith("up") and k.endswith("conv0.w")) == 5


def test_decoder_reduces_concatenation_by_four(vs):
    widths = vs.level_widths()
    h = widths[-1]
    for m, d in zip(reversed(range(vs.levels)), vs.decoder_widths()):
        assert d == (h + widths[m]) // 4
        h = d


def test_generator_rejects_bad_inputs(dr, vs):
    with pytest.raises(ValueError):
        dr(Tensor(np.zeros((2, 48, 48))))  # not divisible by 32
    with pytest.raises(ValueError):
        dr(Tensor(np.zeros((2, 32, 32))))  # bottleneck would be 1x1
    with pytest.raises(ValueError):
        vs(Tensor(np.zeros((3, 64, 64))))
    with pytest.raises(ValueError):
        build_vs_generator(2)


def test_vs_feature_taps(vs, rng):
    x = Tensor(rng.normal(size=(2, 64, 64)))
    with no_grad():
        taps = tap_vs_features(vs, x)
        again = tap_vs_features(vs, x)
    assert len(taps) == 4
    assert [t.shape[-1] for t in taps] == [32, 16, 8, 4]
    assert [t.shape[0] for t in taps] == [8, 16, 32, 64]
    assert all(np.array_equal(a.data, b.data) for a, b in zip(taps, again))


def test_vs_feature_taps_need_stainer(dr):
    with pytest.raises(TypeError):
        tap_vs_features(dr, Tensor(np.zeros((2, 64, 64))))


def test_discriminator_shapes(rng):
    d = build_discriminator(3, 4, seed=0)
    x = Tensor(rng.normal(size=(3, 64, 64)))
    with no_grad():
        taps = tap_disc_features(d, x)
        p = d(x).item()
    assert len(taps) == 6
    assert [t.shape[-1] for t in taps] == [32, 16, 8, 4, 2, 1]
    assert [t.shape[0] for t in taps] == [4 * 2 ** j for j in range(6)]
    assert 0.0 < p < 1.0
    with no_grad():
        assert d(Tensor(rng.normal(size=(5, 3, 64, 64)))).shape == (5,)
    with pytest.raises(ValueError):
        d(Tensor(np.zeros((3, 48, 48))))


def test_frozen_taps_leave_no_gradient(vs, rng):
    vs.freeze()
    try:
        x = Tensor(rng.normal(size=(2, 64, 64)), requires_grad=True)
        loss = sum(t.abs().mean() for t in tap_vs_features(vs, x))
        (gx,) = backward(loss, [x])
        assert np.abs(gx).sum() > 0
        assert all(p.grad is None for p in vs.parameters())
    finally:
        vs.unfreeze()


def test_rebuild_from_config_matches(vs):
    twin = build_from_config(vs.config(), seed=vs.seed)
    assert twin.parameter_hash() == vs.parameter_hash()


def test_refocuser_output_is_standardized(dr, rng):
    x = 3.0 * rng.normal(size=(2, 64, 64)) + 5.0
    with no_grad():
        out = dr(Tensor(x)).data
    assert np.allclose(out.mean(axis=(1, 2)), 0.0, atol=1e-4)
    assert np.allclose(out.std(axis=(1, 2)), 1.0, atol=1e-3)
    raw = build_dr_generator(8, seed=3, standardize_output=False)
    with no_grad():
        assert np.abs(raw(Tensor(x)).data.mean()) > 1.0  # the input residual carries the offset


def test_generator_first_layer_gradient():
    with default_dtype(np.float64):
        net = build_vs_generator(4, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 32, 32)))
    w0 = net.params["down0.conv0.w"].data.copy()

    def f(w):
        net.params["down0.conv0.w"] = w
        return (net(x) ** 2).mean()

    try:
        check_gradients(f, [w0], 1e-3)
    finally:
        net.params["down0.conv0.w"] = Tensor(w0, requires_grad=True, dtype=np.float64)


def test_translation_consistency_on_constant_background():
    net = build_vs_generator(4, seed=1)
    x = np.zeros((2, 64, 64), dtype=np.float32)
    x[:, 20:28, 20:28] = 1.0
    with no_grad():
        a = net(Tensor(x)).data
        b = net(Tensor(np.roll(x, 16, axis=2))).data
    # shift by a multiple of the coarsest pooling step, compare away from borders
    diff = np.abs(np.roll(a, 16, axis=2) - b)[:, 8:-8, 24:-8]
    assert diff.mean() < 0.05 * (np.abs(a).mean() + 1e-6) + 1e-3


@settings(max_examples=6, deadline=None)
@given(kh=st.integers(1, 3), kw=st.integers(1, 3))
def test_shape_contract_over_sizes(kh, kw):
    net = build_dr_generator(4, seed=0)
    vs_net = build_vs_generator(4, seed=0)
    x = Tensor(np.random.default_rng(kh * 7 + kw).normal(size=(2, 64 * kh, 32 * (kw + 1))))
    with no_grad():
        assert net(x).shape == x.shape
        assert vs_net(x).shape == (3,) + x.shape[1:]
