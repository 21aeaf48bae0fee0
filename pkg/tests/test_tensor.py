import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hspi import tensor as T
from hspi.errors import NonFiniteError, ShapeError

from .conftest import numeric_grad, rel_error

grids = st.integers(1, 6).flatmap(
    lambda r: st.integers(1, 6).flatmap(
        lambda c: arrays(np.float64, (r, c), elements=st.floats(-5, 5, allow_nan=False))
    )
)


# --------------------------------------------------------------------------
# interpolation
# --------------------------------------------------------------------------


def test_bilinear_2x2_to_3x3_midpoints():
    g = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = T.upsample_bilinear(g, 3, 3)
    np.testing.assert_allclose(up[:, 1], [0.5, 1.5, 2.5])
    np.testing.assert_allclose(up[1], [1.0, 1.5, 2.0])
    # corners are reproduced exactly
    assert up[0, 0] == 0 and up[0, 2] == 1 and up[2, 0] == 2 and up[2, 2] == 3


def test_bilinear_same_size_is_identity():
    g = np.random.default_rng(0).normal(size=(5, 7))
    np.testing.assert_array_equal(T.upsample_bilinear(g, 5, 7), g)


def test_bilinear_single_cell_is_constant():
    np.testing.assert_array_equal(T.upsample_bilinear(np.array([[0.3]]), 4, 6), np.full((4, 6), 0.3))


def test_nearest_block_replication():
    g = np.arange(4).reshape(2, 2)
    up = T.upsample_nearest(g, 4, 4)
    np.testing.assert_array_equal(up, [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_nearest_non_divisible_cells_differ_by_at_most_one_pixel():
    for src, dst in [(7, 64), (5, 64), (6, 64), (13, 224)]:
        counts = np.bincount(T.nearest_indices(src, dst), minlength=src)
        assert counts.sum() == dst and counts.max() - counts.min() <= 1


@given(grids, st.integers(6, 20), st.integers(6, 20))
@settings(max_examples=60, deadline=None)
def test_upsampling_value_properties(g, th, tw):
    nearest = T.upsample_nearest(g, th, tw)
    assert set(np.unique(nearest)) == set(np.unique(g))
    bil = T.upsample_bilinear(g, th, tw)
    assert bil.min() >= g.min() - 1e-12 and bil.max() <= g.max() + 1e-12


@given(grids, st.integers(6, 12), st.integers(6, 12), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_bilinear_backward_is_adjoint(g, th, tw, seed):
    y = np.random.default_rng(seed).normal(size=(th, tw))
    lhs = np.sum(T.upsample_bilinear(g, th, tw) * y)
    rhs = np.sum(g * T.upsample_bilinear_backward(g.shape, th, tw, y))
    assert abs(lhs - rhs) <= 1e-9 * (1 + abs(lhs))


def test_bilinear_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    g = rng.uniform(size=(3, 4))
    w = rng.normal(size=(9, 11))
    analytic = T.upsample_bilinear_backward(g.shape, 9, 11, w)
    numeric = numeric_grad(lambda v: np.sum(T.upsample_bilinear(v, 9, 11) * w), g)
    assert rel_error(analytic, numeric).max() < 1e-6


def test_upsample_rejects_shrinking_and_bad_upstream():
    with pytest.raises(ShapeError):
        T.upsample_nearest(np.ones((5, 5)), 4, 8)
    with pytest.raises(ShapeError):
        T.upsample_bilinear(np.ones((5, 5)), 8, 4)
    with pytest.raises(ShapeError):
        T.upsample_bilinear_backward((2, 2), 4, 4, np.ones((3, 4)))


def test_upsample_batches_of_grids():
    g = np.random.default_rng(0).uniform(size=(3, 2, 2))
    up = T.upsample_bilinear(g, 5, 5)
    for k in range(3):
        np.testing.assert_allclose(up[k], T.upsample_bilinear(g[k], 5, 5))


# --------------------------------------------------------------------------
# masking
# --------------------------------------------------------------------------


def test_apply_mask_ones_zeros_and_checkerboard():
    x = np.random.default_rng(0).uniform(size=(6, 6, 3))
    np.testing.assert_array_equal(T.apply_mask(x, np.ones((6, 6))), x)
    np.testing.assert_array_equal(T.apply_mask(x, np.zeros((6, 6))), np.zeros_like(x))
    board = np.indices((6, 6)).sum(axis=0) % 2
    out = T.apply_mask(x, board)
    for r in range(6):
        for c in range(6):
            expected = x[r, c] if board[r, c] else np.zeros(3)
            np.testing.assert_array_equal(out[r, c], expected)


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=30, deadline=None)
def test_apply_mask_is_linear_in_the_mask(seed, a, b):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(4, 5, 3))
    m1, m2 = rng.uniform(size=(2, 4, 5))
    lhs = T.apply_mask(x, a * m1 + b * m2)
    rhs = a * T.apply_mask(x, m1) + b * T.apply_mask(x, m2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_apply_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        T.apply_mask(np.ones((4, 4, 3)), np.ones((4, 5)))


# --------------------------------------------------------------------------
# layers: examples
# --------------------------------------------------------------------------


def test_conv_identity_1x1_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 6, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    y, _ = T.conv2d_forward(x, w, np.zeros(3), pad=0)
    np.testing.assert_array_equal(y, x)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 4, 3))
    w = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    y, _ = T.conv2d_forward(x, w, b, pad=1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 4, 2))
    for n in range(2):
        for r in range(5):
            for c in range(4):
                for o in range(2):
                    ref[n, r, c, o] = np.sum(xp[n, r : r + 3, c : c + 3, :] * w[..., o]) + b[o]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_relu_backward_passes_positive_inputs():
    x = np.array([[0.5, 2.0], [1e-9, 3.0]])
    up = np.array([[1.0, -2.0], [3.0, 4.0]])
    _, cache = T.relu_forward(x)
    np.testing.assert_array_equal(T.relu_backward(up, cache), up)


def test_maxpool_routes_to_first_maximum_on_ties():
    x = np.ones((1, 2, 2, 1))
    y, cache = T.maxpool2_forward(x)
    dx = T.maxpool2_backward(np.full((1, 1, 1, 1), 5.0), cache)
    np.testing.assert_array_equal(dx[0, :, :, 0], [[5, 0], [0, 0]])


def test_layer_shape_errors():
    with pytest.raises(ShapeError):
        T.conv2d_forward(np.ones((1, 4, 4, 3)), np.ones((3, 3, 2, 1)), np.zeros(1))
    with pytest.raises(ShapeError):
        T.maxpool2_forward(np.ones((1, 3, 4, 1)))
    with pytest.raises(ShapeError):
        T.dense_forward(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        T.global_avg_pool_backward(np.ones((2, 3)), (2, 4, 4, 5))
    with pytest.raises(ShapeError):
        T.relu_backward(np.ones((2, 2)), np.ones((2, 3)))


def test_non_finite_inputs_are_rejected():
    x = np.ones((1, 4, 4, 3))
    x[0, 1, 1, 0] = np.nan
    with pytest.raises(NonFiniteError):
        T.conv2d_forward(x, np.ones((3, 3, 3, 1)), np.zeros(1))
    with pytest.raises(NonFiniteError):
        T.dense_forward(np.array([[np.inf, 1.0]]), np.ones((2, 2)), np.zeros(2))


# --------------------------------------------------------------------------
# layers: finite-difference property
# --------------------------------------------------------------------------


def _check_layer(forward, backward, x, params, rng, tol=1e-3):
    """Analytic input/parameter gradients of <forward(x), r> against finite differences."""
    y, cache = forward(x, *params)
    r = rng.normal(size=y.shape)
    out = backward(r, cache)
    dx, *dparams = out if isinstance(out, tuple) else (out,)
    num = numeric_grad(lambda v: np.sum(forward(v, *params)[0] * r), x)
    assert rel_error(dx, num).max() < tol
    for k, (p, dp) in enumerate(zip(params, dparams)):
        def f(v, k=k):
            ps = list(params)
            ps[k] = v
            return np.sum(forward(x, *ps)[0] * r)
        assert rel_error(dp, numeric_grad(f, p)).max() < tol


def test_conv_gradients_small_random():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 5, 5, 3))
    w = rng.normal(size=(3, 3, 3, 2))
    b = rng.normal(size=2)
    _check_layer(lambda v, w_, b_: T.conv2d_forward(v, w_, b_, pad=1), T.conv2d_backward, x, [w, b], rng)


def test_conv_gradients_without_padding():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    _check_layer(lambda v, w_, b_: T.conv2d_forward(v, w_, b_, pad=0), T.conv2d_backward, x,
                 [w, rng.normal(size=3)], rng)


def test_dense_gradients():
    rng = np.random.default_rng(5)
    _check_layer(T.dense_forward, T.dense_backward, rng.normal(size=(3, 4)),
                 [rng.normal(size=(4, 2)), rng.normal(size=2)], rng)


def test_gap_gradient():
    rng = np.random.default_rng(6)
    _check_layer(T.global_avg_pool_forward, T.global_avg_pool_backward, rng.normal(size=(2, 3, 4, 5)), [], rng)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_relu_and_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    # keep entries away from the kinks so finite differences are exact
    x = rng.permutation(np.arange(1, 2 * 4 * 4 * 2 + 1)).reshape(2, 4, 4, 2) * 0.01
    x = x * rng.choice([-1, 1], size=x.shape)
    _check_layer(T.relu_forward, T.relu_backward, x, [], rng)
    _check_layer(T.maxpool2_forward, T.maxpool2_backward, x, [], rng)
