import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffwm.tensorcore import (CIRCULAR, POINTWISE, ConvLayer, ShapeError, conv_backward,
                               conv_forward, depth_to_space, finite_difference_check,
                               space_to_depth, tiled_valid_conv)
from diffwm.gradcheck import check_layer, passed


def test_space_to_depth_channel_index():
    img = np.arange(64, dtype=float).reshape(8, 8)
    t = space_to_depth(img, 8, 8)
    assert t.shape == (64, 1, 1)
    for k in range(64):
        assert t[k, 0, 0] == img[k // 8, k % 8]


def test_space_to_depth_constant():
    t = space_to_depth(np.full((16, 16), 5.0), 8, 8)
    assert t.shape == (64, 2, 2)
    assert np.all(t == 5)


def test_depth_to_space_from_channel_values():
    t = np.arange(64, dtype=float).reshape(64, 1, 1)
    img = depth_to_space(t, 8, 8)
    assert img[3, 5] == 3 * 8 + 5


def test_training_patch_shape(rng):
    img = depth_to_space(rng.standard_normal((64, 4, 4)), 8, 8)
    assert img.shape == (32, 32)


def test_round_trip_batched(rng):
    img = rng.standard_normal((3, 32, 32))
    assert np.array_equal(depth_to_space(space_to_depth(img, 8, 8), 8, 8), img)


def test_rectangular_blocks(rng):
    img = rng.standard_normal((12, 20))
    t = space_to_depth(img, 4, 5)
    assert t.shape == (20, 3, 4)
    assert np.array_equal(depth_to_space(t, 4, 5), img)


def test_indivisible_shape_rejected():
    with pytest.raises(ShapeError):
        space_to_depth(np.zeros((10, 16)), 8, 8)
    with pytest.raises(ShapeError):
        depth_to_space(np.zeros((10, 2, 2)), 8, 8)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_round_trip_property(m, n, bh, bw, seed):
    img = np.random.default_rng(seed).standard_normal((m * bh, n * bw))
    assert np.array_equal(depth_to_space(space_to_depth(img, m, n), m, n), img)


def test_pointwise_identity(rng):
    layer = ConvLayer(POINTWISE, np.eye(5)[:, :, None, None], None, "identity")
    x = rng.standard_normal((5, 4, 4))
    assert np.array_equal(conv_forward(x, layer), x)


def test_circular_smoothing_preserves_constant():
    layer = ConvLayer(CIRCULAR, np.full((1, 1, 2, 2), 0.25), None, "identity")
    out = conv_forward(np.full((1, 4, 4), 7.0), layer)
    np.testing.assert_allclose(out, 7.0, rtol=0, atol=1e-12)


def test_circular_single_tap_is_identity():
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 1
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert np.array_equal(conv_forward(x, ConvLayer(CIRCULAR, w, None, "identity")), x)


def test_circular_wraps():
    # tap (1,1) reads the diagonal neighbour, wrapping at the border
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 1, 1] = 1
    x = np.arange(9, dtype=float).reshape(1, 3, 3)
    out = conv_forward(x, ConvLayer(CIRCULAR, w, None, "identity"))
    assert out[0, 2, 2] == x[0, 0, 0]
    assert out[0, 0, 0] == x[0, 1, 1]


def test_circular_matches_tiled_conv(rng):
    for _ in range(10):
        layer = ConvLayer(CIRCULAR, rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(3), "elu")
        x = rng.standard_normal((2, 4, 4))
        np.testing.assert_allclose(conv_forward(x, layer), tiled_valid_conv(x, layer), atol=1e-12)


def test_activations(rng):
    x = rng.standard_normal((1, 3, 3)) * 3
    w = np.ones((1, 1, 1, 1))
    elu = conv_forward(x, ConvLayer(POINTWISE, w, None, "elu"))
    np.testing.assert_allclose(elu, np.where(x > 0, x, np.expm1(x)))
    sig = conv_forward(x, ConvLayer(POINTWISE, w, None, "sigmoid"))
    np.testing.assert_allclose(sig, 1 / (1 + np.exp(-x)))


def test_channel_mismatch():
    layer = ConvLayer(POINTWISE, np.ones((2, 3, 1, 1)), None, "identity")
    with pytest.raises(ShapeError):
        conv_forward(np.ones((4, 2, 2)), layer)


def test_bad_layer_definitions():
    with pytest.raises(ValueError):
        ConvLayer("dilated", np.ones((1, 1, 2, 2)), None, "identity")
    with pytest.raises(ValueError):
        ConvLayer(POINTWISE, np.ones((1, 1, 1, 1)), None, "relu6")
    with pytest.raises(ShapeError):
        ConvLayer(CIRCULAR, np.ones((1, 1, 1, 1)), None, "identity")
    with pytest.raises(ShapeError):
        ConvLayer(POINTWISE, np.ones((2, 1, 1, 1)), np.ones(3), "identity")


def test_backward_identity_layer(rng):
    layer = ConvLayer(POINTWISE, np.eye(4)[:, :, None, None], None, "identity")
    x = rng.standard_normal((4, 3, 3))
    g = rng.standard_normal((4, 3, 3))
    gx, _, gb = conv_backward(x, layer, g)
    assert np.array_equal(gx, g)
    assert gb is None


def test_backward_zero_grad(rng):
    layer = ConvLayer(CIRCULAR, rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(3), "elu")
    x = rng.standard_normal((2, 4, 4))
    gx, gw, gb = conv_backward(x, layer, np.zeros((3, 4, 4)))
    assert not gx.any() and not gw.any() and not gb.any()


@pytest.mark.parametrize("kind,k", [(POINTWISE, 1), (CIRCULAR, 2)])
@pytest.mark.parametrize("act", ["identity", "elu", "sigmoid"])
def test_layer_gradients(rng, kind, k, act):
    layer = ConvLayer(kind, rng.standard_normal((3, 4, k, k)) * 0.5, rng.standard_normal(3), act)
    x = rng.standard_normal((2, 4, 4, 4))
    for name, res in check_layer(layer, x, rng, probes=4).items():
        assert passed(res), (name, res)


def test_fd_check_square():
    assert finite_difference_check(lambda v: v[0] ** 2, np.array([3.0]), np.array([6.0])) < 1e-8


def test_fd_check_constant():
    assert finite_difference_check(lambda v: 4.0, np.zeros(3), np.zeros(3)) == 0


def test_fd_check_non_finite():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        finite_difference_check(lambda v: np.log(v[0]), np.array([0.0]), np.array([1.0]))
