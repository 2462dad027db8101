import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdpad import core
from cdpad.core import AdamState, ParamSet, adam_step, finite_difference_check
from cdpad.errors import ShapeError, StageError


def rng(seed=0):
    return np.random.default_rng(seed)


def vjp_check(op_vjp, args, wrt, tol=1e-5, seed=1, max_coords=None, h=None, **kw):
    """Check the pullback of ``op_vjp`` w.r.t. ``args[i] for i in wrt`` against central differences."""
    y, back = op_vjp(*args, **kw)
    r = np.random.default_rng(seed).standard_normal(np.shape(y))
    grads = back(r)
    if not isinstance(grads, (tuple, list)):
        grads = (grads,)

    def f():
        return float(np.sum(op_vjp(*args, **kw)[0] * r))

    return finite_difference_check(f, [args[i] for i in wrt], [grads[j] for j in range(len(wrt))],
                                   tolerance=tol, max_coords=max_coords, h=h)


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = np.array([[[5.0]]])
    assert core.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1)).tolist() == [[[5.0]]]


def test_conv_all_ones_sum():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    y = core.conv2d(x, np.ones((2, 2, 1, 1)), np.zeros(1))
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 10.0


def direct_conv(x, w, b, stride, pad):
    """Naive summation oracle."""
    k, _, cin, cout = w.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho = (x.shape[0] + 2 * pad - k) // stride + 1
    wo = (x.shape[1] + 2 * pad - k) // stride + 1
    y = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                y[i, j, o] = b[o] + np.sum(xp[i * stride:i * stride + k, j * stride:j * stride + k, :] * w[..., o])
    return y


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (5, 1, 2), (3, 2, 0), (1, 1, 0), (2, 2, 1)])
def test_conv_matches_direct_summation(k, stride, pad):
    r = rng(k * 10 + stride)
    x = r.standard_normal((7, 6, 3))
    w = r.standard_normal((k, k, 3, 4))
    b = r.standard_normal(4)
    np.testing.assert_allclose(core.conv2d(x, w, b, stride, pad), direct_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv_stem_shape_and_params():
    x = np.zeros((124, 118, 1), dtype=np.float32)
    w = np.zeros((5, 5, 1, 96), dtype=np.float32)
    y = core.conv2d(x, w, np.zeros(96, dtype=np.float32), 1, 2)
    assert y.shape == (124, 118, 96)
    assert w.size + 96 == 2496


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        core.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0)])
def test_conv_gradcheck(k, stride, pad):
    r = rng(3)
    x = r.standard_normal((2, 4, 4, 2))
    w = r.standard_normal((k, k, 2, 3))
    b = r.standard_normal(3)
    res = vjp_check(lambda x, w, b: core.conv2d_vjp(x, w, b, stride, pad), [x, w, b], [0, 1, 2])
    assert res.passed, res.max_rel_error


# ---------------------------------------------------------------- pooling

def test_pool_ceil_shape():
    assert core.maxpool2d_ceil(np.zeros((31, 30, 192))).shape == (16, 15, 192)


def test_pool_single_window():
    x = np.array([[1.0, 7.0], [3.0, 2.0]])[..., None]
    assert core.maxpool2d_ceil(x)[0, 0, 0] == 7.0


def test_pool_ragged_row():
    x = np.array([[1.0, 3.0, 2.0, 5.0, 4.0]])[..., None]
    assert core.maxpool2d_ceil(x)[..., 0].tolist() == [[3.0, 5.0, 4.0]]


@given(st.integers(1, 9), st.integers(1, 9))
@settings(max_examples=30, deadline=None)
def test_pool_shape_property(h, w):
    assert core.maxpool2d_ceil(np.zeros((h, w, 2))).shape == (math.ceil(h / 2), math.ceil(w / 2), 2)


def test_pool_gradcheck():
    x = rng(4).permutation(2 * 5 * 3 * 2).reshape(2, 5, 3, 2).astype(np.float64)  # distinct values, no ties
    res = vjp_check(core.maxpool2d_ceil_vjp, [x], [0], h=1e-3)
    assert res.passed, res.max_rel_error


# ---------------------------------------------------------------- linear

def test_linear_hand_example():
    y = core.linear(np.array([1.0, 2.0]), np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([0.0, 1.0]))
    assert y.tolist() == [1.0, 5.0]


def test_linear_identity():
    x = rng().standard_normal(5)
    np.testing.assert_array_equal(core.linear(x, np.eye(5), np.zeros(5)), x)


def test_linear_dims():
    with pytest.raises(ShapeError):
        core.linear(np.zeros(3), np.zeros((4, 2)), np.zeros(2))
    assert 8192 * 512 + 512 == 4_194_816


def test_linear_gradcheck():
    r = rng(5)
    res = vjp_check(core.linear_vjp, [r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)],
                    [0, 1, 2], tol=1e-6)
    assert res.passed, res.max_rel_error


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_constant_channel():
    x = np.full((2, 3, 3, 2), 4.0)
    y = core.batchnorm2d(x, np.ones(2), np.array([0.5, -1.0]))
    np.testing.assert_allclose(y[..., 0], 0.5)
    np.testing.assert_allclose(y[..., 1], -1.0)


def test_batchnorm_two_values():
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    y = core.batchnorm2d(x, np.ones(1), np.zeros(1))
    np.testing.assert_allclose(y.ravel(), [-1.0, 1.0], atol=1e-2)


def test_batchnorm_running_stats_and_eval():
    x = rng(6).standard_normal((4, 2, 2, 3)) * 2 + 1
    rm, rv = np.zeros(3), np.ones(3)
    core.batchnorm2d(x, np.ones(3), np.zeros(3), "train", rm, rv)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 1, 2)))
    y = core.batchnorm2d(x, np.ones(3), np.zeros(3), "eval", rm, rv)
    np.testing.assert_allclose(y, (x - rm) / np.sqrt(rv + 1e-5))


def test_batchnorm_single_value_no_error():
    y = core.batchnorm2d(np.ones((1, 1, 1, 1)), np.ones(1), np.zeros(1))
    assert np.isfinite(y).all()


def test_batchnorm_gradcheck():
    r = rng(7)
    args = [r.standard_normal((3, 2, 2, 2)), r.standard_normal(2), r.standard_normal(2)]
    res = vjp_check(core.batchnorm2d_vjp, args, [0, 1, 2])
    assert res.passed, res.max_rel_error


# ---------------------------------------------------------------- pointwise / concat

def test_pointwise_examples():
    assert core.pointwise(np.array([-1.0, 0.0, 2.0]), "relu").tolist() == [0.0, 0.0, 2.0]
    assert core.pointwise(0.0, "sigmoid") == 0.5
    assert core.pointwise(math.log(3.0), "sigmoid") == pytest.approx(0.75, abs=1e-15)


@pytest.mark.parametrize("kind", ["relu", "sigmoid"])
def test_pointwise_gradcheck(kind):
    x = rng(8).standard_normal((3, 4))
    x[np.abs(x) < 1e-3] = 0.5
    res = vjp_check(lambda x: core.pointwise_vjp(x, kind), [x], [0])
    assert res.passed, res.max_rel_error


def test_concat_blocks():
    parts = [rng(i).standard_normal((16, 15, 48)) for i in range(4)]
    y = core.concat_channels(parts)
    assert y.shape == (16, 15, 192)
    for i, p in enumerate(parts):
        np.testing.assert_array_equal(y[..., 48 * i:48 * (i + 1)], p)
    np.testing.assert_array_equal(core.concat_channels(parts[:1]), parts[0])


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        core.concat_channels([np.zeros((2, 2, 1)), np.zeros((2, 3, 1))])


def test_concat_gradcheck():
    a, b = rng(9).standard_normal((2, 3, 2)), rng(10).standard_normal((2, 3, 3))
    y, back = core.concat_channels_vjp([a, b])
    r = rng(11).standard_normal(y.shape)
    ga, gb = back(r)

    def f():
        return float(np.sum(core.concat_channels([a, b]) * r))

    assert finite_difference_check(f, [a, b], [ga, gb], tolerance=1e-6).passed


def test_mfm_even_only():
    with pytest.raises(ShapeError):
        core.mfm(np.zeros((2, 3)))


# ---------------------------------------------------------------- bce

def test_bce_examples():
    assert core.bce_loss(1 - 1e-7, 1.0) == pytest.approx(0.0, abs=1e-6)
    assert core.bce_loss(0.5, 1.0) == pytest.approx(math.log(2), abs=1e-12)
    assert core.bce_loss(0.5, 0.5) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_clamped_extremes_are_finite():
    assert math.isfinite(core.bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0])))


def test_bce_gradcheck_soft_labels():
    p = rng(12).uniform(0.1, 0.9, size=6)
    y = rng(13).uniform(0, 1, size=6)
    loss, back = core.bce_loss_vjp(p, y)
    res = finite_difference_check(lambda: core.bce_loss(p, y), [p], [back(1.0)], tolerance=1e-5)
    assert res.passed, res.max_rel_error


def test_bce_with_logits_matches_probability_form():
    z = rng(14).standard_normal(8)
    y = (rng(15).random(8) > 0.5).astype(float)
    loss, back = core.bce_with_logits_vjp(z, y)
    assert loss == pytest.approx(core.bce_loss(core.pointwise(z, "sigmoid"), y), rel=1e-12)
    assert finite_difference_check(lambda: core.bce_with_logits_vjp(z, y)[0], [z], [back()], tolerance=1e-6).passed


# ---------------------------------------------------------------- adam

def make_params(grad):
    ps = ParamSet()
    ps.add("a", np.array([1.0, -2.0]))
    ps.add("frozen", np.array([3.0]), trainable=False)
    ps.accumulate("a", np.asarray(grad, dtype=float))
    ps.accumulate("frozen", np.array([5.0]))
    return ps


def test_adam_zero_gradient_noop():
    ps = make_params([0.0, 0.0])
    adam_step(ps, AdamState())
    assert ps["a"].tolist() == [1.0, -2.0]


def test_adam_first_step():
    ps = make_params([1.0, 1.0])
    state = AdamState(lr=1e-4)
    adam_step(ps, state)
    np.testing.assert_allclose(ps["a"], [1.0 - 1e-4, -2.0 - 1e-4], rtol=0, atol=1e-11)
    assert state.step == 1
    assert ps.params["a"].grad is None


def test_adam_frozen_untouched():
    ps = make_params([1.0, 1.0])
    adam_step(ps, AdamState())
    assert ps["frozen"].tolist() == [3.0]


def test_adam_missing_gradient():
    ps = ParamSet()
    ps.add("w", np.zeros(2))
    with pytest.raises(StageError):
        adam_step(ps, AdamState())


def test_adam_moments_match_shapes_and_step_increments():
    ps = ParamSet()
    ps.add("w", np.zeros((2, 3)))
    state = AdamState()
    for i in range(3):
        ps.accumulate("w", np.ones((2, 3)))
        adam_step(ps, state)
        assert state.step == i + 1
    assert state.m["w"].shape == state.v["w"].shape == (2, 3)


# ---------------------------------------------------------------- determinism

def test_primitives_bitwise_deterministic():
    r = rng(16)
    x = r.standard_normal((2, 6, 6, 3)).astype(np.float32)
    w = r.standard_normal((3, 3, 3, 4)).astype(np.float32)
    b = r.standard_normal(4).astype(np.float32)
    a1 = core.mfm(core.maxpool2d_ceil(core.conv2d(x, w, b, 1, 1)))
    a2 = core.mfm(core.maxpool2d_ceil(core.conv2d(x, w, b, 1, 1)))
    assert a1.tobytes() == a2.tobytes()


def test_finite_values_preserved():
    x = rng(17).standard_normal((2, 5, 5, 4))
    y = core.batchnorm2d(core.maxpool2d_ceil(x), np.ones(4), np.zeros(4))
    assert np.isfinite(core.mfm(y)).all()


def test_gradcheck_reports_failure():
    x = np.array([1.0, 2.0])
    res = finite_difference_check(lambda: float(np.sum(x ** 2)), [x], [np.zeros(2)], tolerance=1e-4)
    assert not res.passed and res.max_rel_error == pytest.approx(1.0)
