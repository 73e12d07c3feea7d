"""Tensor core: forward oracles and gradient checks.

Convolution is checked against a six-loop reference, resizing and
normalization against hand-computed values, and every differentiable op
against central finite differences in float64.
"""
import itertools
import warnings

import numpy as np
import pytest

import mcl.tensor as T


def t64(a, requires_grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad)


def fd_max_err(f, params, eps=1e-5):
    return T.finite_diff_check(f, params, eps=eps)


# ---------------------------------------------------------------------------
# convolution


def conv2d_reference(x, w, b, stride, pad):
    """Direct six-loop cross-correlation, the oracle for conv2d."""
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    for bi in range(B):
        for co in range(Cout):
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = 0.0
                    for ci in range(Cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[bi, ci, oy * stride + ky, ox * stride + kx] \
                                    * w[co, ci, ky, kx]
                    out[bi, co, oy, ox] = acc + (b[co] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("seed,stride,pad,bias", [
    (0, 1, 0, True), (1, 1, 1, True), (2, 2, 1, False),
    (3, 2, 0, True), (4, 1, 2, False),
])
def test_conv2d_matches_loop_reference(seed, stride, pad, bias):
    g = np.random.default_rng(seed)
    x = g.standard_normal((2, 3, 7, 6))
    w = g.standard_normal((4, 3, 3, 3))
    b = g.standard_normal(4) if bias else None
    out = T.conv2d(t64(x), t64(w), None if b is None else t64(b),
                   stride=stride, pad=pad)
    ref = conv2d_reference(x, w, b, stride, pad)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_float32_close_to_float64_reference():
    g = np.random.default_rng(7)
    x = g.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = g.standard_normal((5, 3, 3, 3)).astype(np.float32)
    b = g.standard_normal(5).astype(np.float32)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=1, pad=1)
    ref = conv2d_reference(x.astype(np.float64), w.astype(np.float64),
                           b.astype(np.float64), 1, 1)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out.data, ref, rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, pad):
    g = np.random.default_rng(11)
    x = t64(g.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = t64(g.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = t64(g.standard_normal(3), requires_grad=True)

    def f():
        y = T.conv2d(x, w, b, stride=stride, pad=pad)
        return T.tsum(T.mul(y, y))

    assert fd_max_err(f, [x, w, b]) < 5e-6


def test_conv2d_rejects_channel_mismatch():
    x = t64(np.zeros((1, 3, 4, 4)))
    w = t64(np.zeros((2, 4, 3, 3)))
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(x, w)


def test_conv2d_rejects_oversized_kernel():
    x = t64(np.zeros((1, 1, 2, 2)))
    w = t64(np.zeros((1, 1, 5, 5)))
    with pytest.raises(ValueError, match="exceeds"):
        T.conv2d(x, w, pad=1)


# ---------------------------------------------------------------------------
# batch normalization


def test_batchnorm_hand_values():
    # batch {1,2,3,4}: mean 2.5, biased var 1.25, eps=0
    # (x - mean)/sqrt(var) = [-1.34164079, -0.4472136, 0.4472136, 1.34164079]
    x = t64(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1))
    gam = t64(np.ones(1))
    bet = t64(np.zeros(1))
    out, mean, var = T.batchnorm_train(x, gam, bet, eps=0.0)
    np.testing.assert_allclose(mean, [2.5], rtol=0, atol=0)
    np.testing.assert_allclose(var, [1.25], rtol=0, atol=1e-15)
    expect = np.array([-1.34164079, -0.4472136, 0.4472136, 1.34164079]).reshape(4, 1)
    np.testing.assert_allclose(out.data, expect, atol=1e-8)


def test_batchnorm_train_normalizes_each_channel():
    g = np.random.default_rng(3)
    x = t64(g.standard_normal((8, 5, 6, 6)) * 3.0 + 1.0)
    out, _, _ = T.batchnorm_train(x, t64(np.ones(5)), t64(np.zeros(5)), eps=1e-12)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), np.zeros(5), atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), np.ones(5), atol=1e-9)


@pytest.mark.parametrize("shape", [(6, 3), (4, 2, 3, 3)])
def test_batchnorm_train_gradients(shape):
    g = np.random.default_rng(5)
    C = shape[1]
    x = t64(g.standard_normal(shape), requires_grad=True)
    gam = t64(1.0 + 0.1 * g.standard_normal(C), requires_grad=True)
    bet = t64(0.1 * g.standard_normal(C), requires_grad=True)
    coef = t64(g.standard_normal(shape))

    def f():
        y, _, _ = T.batchnorm_train(x, gam, bet, eps=1e-5)
        return T.tsum(T.mul(y, coef))

    assert fd_max_err(f, [x, gam, bet]) < 5e-6


def test_batchnorm_eval_gradients_and_values():
    g = np.random.default_rng(6)
    x = t64(g.standard_normal((4, 3, 2, 2)), requires_grad=True)
    gam = t64(g.standard_normal(3), requires_grad=True)
    bet = t64(g.standard_normal(3), requires_grad=True)
    mean = g.standard_normal(3)
    var = g.uniform(0.5, 2.0, 3)

    y = T.batchnorm_eval(x, gam, bet, mean, var, eps=1e-5)
    expect = (x.data - mean[None, :, None, None]) / np.sqrt(var + 1e-5)[None, :, None, None]
    expect = expect * gam.data[None, :, None, None] + bet.data[None, :, None, None]
    np.testing.assert_allclose(y.data, expect, rtol=1e-12, atol=1e-12)

    coef = t64(g.standard_normal((4, 3, 2, 2)))

    def f():
        out = T.batchnorm_eval(x, gam, bet, mean, var, eps=1e-5)
        return T.tsum(T.mul(out, coef))

    assert fd_max_err(f, [x, gam, bet]) < 5e-6


def test_batchnorm_rejects_single_sample():
    x = t64(np.zeros((1, 3)))
    with pytest.raises(ValueError, match="at least 2"):
        T.batchnorm_train(x, t64(np.ones(3)), t64(np.zeros(3)))


# ---------------------------------------------------------------------------
# bilinear resize


def test_bilinear_resize_identity_is_bit_exact():
    g = np.random.default_rng(9)
    x = g.standard_normal((2, 3, 5, 7)).astype(np.float32)
    out = T.bilinear_resize(T.Tensor(x), 5, 7)
    assert np.array_equal(out.data, x)


def test_bilinear_resize_2x2_to_1x1_is_mean():
    x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.bilinear_resize(x, 1, 1)
    # the single half-pixel center falls exactly between all four samples
    np.testing.assert_allclose(out.data, [[[[2.5]]]], rtol=0, atol=0)


def test_bilinear_resize_upsample_1d_hand_values():
    # 2 -> 4 with half-pixel centers: weights [1, 0]; [.75, .25]; [.25, .75]; [0, 1]
    x = t64(np.array([0.0, 1.0]).reshape(1, 1, 1, 2))
    out = T.bilinear_resize(x, 1, 4)
    np.testing.assert_allclose(out.data.ravel(), [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_bilinear_resize_downsample_1d_hand_values():
    # 4 -> 2: each output is the mean of the two nearest inputs
    x = t64(np.array([1.0, 3.0, 5.0, 9.0]).reshape(1, 1, 1, 4))
    out = T.bilinear_resize(x, 1, 2)
    np.testing.assert_allclose(out.data.ravel(), [2.0, 7.0], atol=1e-15)


def test_bilinear_resize_matches_array_helper():
    g = np.random.default_rng(10)
    x = g.standard_normal((2, 3, 8, 6))
    a = T.bilinear_resize(t64(x), 5, 9).data
    b = T.bilinear_resize_array(x, 5, 9)
    np.testing.assert_allclose(a, b.reshape(2, 3, 5, 9), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("out_hw", [(2, 2), (7, 3), (8, 8)])
def test_bilinear_resize_gradients(out_hw):
    g = np.random.default_rng(12)
    x = t64(g.standard_normal((1, 2, 4, 4)), requires_grad=True)
    coef = t64(g.standard_normal((1, 2) + out_hw))

    def f():
        return T.tsum(T.mul(T.bilinear_resize(x, *out_hw), coef))

    assert fd_max_err(f, [x]) < 5e-6


# ---------------------------------------------------------------------------
# pooling


def test_region_avg_pool_quadrants():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    fmap = t64(x)
    # top-left quadrant of [[0..3],[4..7],...] is {0,1,4,5}, mean 2.5
    out = T.region_avg_pool(fmap, (0, 0, 2, 2))
    np.testing.assert_allclose(out.data, [2.5])
    out = T.region_avg_pool(fmap, (2, 2, 4, 4))
    np.testing.assert_allclose(out.data, [(10 + 11 + 14 + 15) / 4])


def test_region_avg_pool_rejects_empty_box():
    fmap = t64(np.zeros((1, 4, 4)))
    with pytest.raises(ValueError, match="empty or outside"):
        T.region_avg_pool(fmap, (2, 2, 2, 4))
    with pytest.raises(ValueError, match="empty or outside"):
        T.region_avg_pool(fmap, (0, 0, 5, 4))


def test_region_avg_pool_gradients():
    g = np.random.default_rng(13)
    x = t64(g.standard_normal((3, 4, 5)), requires_grad=True)
    coef = t64(g.standard_normal(3))

    def f():
        return T.tsum(T.mul(T.region_avg_pool(x, (1, 2, 4, 4)), coef))

    assert fd_max_err(f, [x]) < 5e-6


def test_grid_avg_pool_matches_per_region_loop():
    g = np.random.default_rng(14)
    x = g.standard_normal((3, 4, 8, 8))
    grid = 4
    out = T.grid_avg_pool(t64(x), grid).data
    hb = wb = 8 // grid
    k = 0
    for n in range(3):
        for gy in range(grid):
            for gx in range(grid):
                ref = x[n, :, gy * hb:(gy + 1) * hb, gx * wb:(gx + 1) * wb].mean(axis=(1, 2))
                np.testing.assert_allclose(out[k], ref, rtol=1e-12)
                k += 1


def test_grid_avg_pool_gradients():
    g = np.random.default_rng(15)
    x = t64(g.standard_normal((2, 3, 4, 4)), requires_grad=True)
    coef = t64(g.standard_normal((2 * 4, 3)))

    def f():
        return T.tsum(T.mul(T.grid_avg_pool(x, 2), coef))

    assert fd_max_err(f, [x]) < 5e-6


def test_upsample_nearest2x():
    x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2), requires_grad=True)
    out = T.upsample_nearest2x(x)
    expect = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=np.float64)
    np.testing.assert_allclose(out.data[0, 0], expect)
    coef = t64(np.random.default_rng(16).standard_normal((1, 1, 4, 4)))
    assert fd_max_err(lambda: T.tsum(T.mul(T.upsample_nearest2x(x), coef)), [x]) < 5e-6


# ---------------------------------------------------------------------------
# normalization of embeddings


def test_l2_normalize_unit_rows():
    g = np.random.default_rng(17)
    x = t64(g.standard_normal((6, 5)) * 4.0)
    out = T.l2_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), np.ones(6), rtol=1e-12)


def test_l2_normalize_zero_row_flagged_and_finite():
    x = t64(np.vstack([np.zeros(4), np.ones(4)]))
    with pytest.warns(RuntimeWarning, match="below eps"):
        out = T.l2_normalize(x)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data[0], np.zeros(4))


def test_l2_normalize_gradients():
    g = np.random.default_rng(18)
    x = t64(g.standard_normal((4, 6)), requires_grad=True)
    coef = t64(g.standard_normal((4, 6)))

    def f():
        return T.tsum(T.mul(T.l2_normalize(x), coef))

    assert fd_max_err(f, [x]) < 5e-6


# ---------------------------------------------------------------------------
# softmax cross entropy


def test_softmax_cross_entropy_matches_manual():
    g = np.random.default_rng(19)
    z = g.standard_normal((5, 7))
    labels = g.integers(0, 7, 5)
    out = T.softmax_cross_entropy(t64(z), labels)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    ref = -np.log(p[np.arange(5), labels]).mean()
    np.testing.assert_allclose(out.item(), ref, rtol=1e-12)


def test_softmax_cross_entropy_stable_for_huge_logits():
    z = np.array([[1e4, 0.0], [-1e4, 1e4]])
    out = T.softmax_cross_entropy(t64(z), [0, 1])
    assert np.isfinite(out.item())
    np.testing.assert_allclose(out.item(), 0.0, atol=1e-12)


@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_softmax_cross_entropy_gradients(reduction):
    g = np.random.default_rng(20)
    z = t64(g.standard_normal((4, 5)), requires_grad=True)
    labels = g.integers(0, 5, 4)

    def f():
        return T.softmax_cross_entropy(z, labels, reduction=reduction)

    assert fd_max_err(f, [z]) < 5e-6


def test_softmax_cross_entropy_rejects_bad_labels():
    z = t64(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="label"):
        T.softmax_cross_entropy(z, [0, 3])


# ---------------------------------------------------------------------------
# elementwise, reductions, structure ops


@pytest.mark.parametrize("seed", range(4))
def test_elementwise_and_matmul_gradients(seed):
    g = np.random.default_rng(100 + seed)
    a = t64(g.standard_normal((3, 4)), requires_grad=True)
    b = t64(g.standard_normal((3, 4)), requires_grad=True)
    w = t64(g.standard_normal((4, 2)), requires_grad=True)
    bias = t64(g.standard_normal(2), requires_grad=True)

    def f():
        h = T.add(T.mul(a, b), T.scale(a, 0.5))
        h = T.relu(T.add(T.matmul(h, w), bias))
        return T.tmean(T.mul(h, h))

    assert fd_max_err(f, [a, b, w, bias]) < 5e-6


def test_exp_log_sum_gradients():
    g = np.random.default_rng(21)
    x = t64(g.uniform(0.5, 2.0, (3, 3)), requires_grad=True)

    def f():
        return T.tsum(T.log(T.add_scalar(T.exp(x), 1.0)))

    assert fd_max_err(f, [x]) < 5e-6


@pytest.mark.parametrize("axis,keepdims", list(itertools.product([None, 0, 1, (0, 1)], [False, True])))
def test_sum_axes(axis, keepdims):
    g = np.random.default_rng(22)
    x = g.standard_normal((3, 5))
    out = T.tsum(t64(x), axis=axis, keepdims=keepdims)
    np.testing.assert_allclose(out.data, x.sum(axis=axis, keepdims=keepdims), rtol=1e-12)


def test_gather_rows_forward_and_grad():
    g = np.random.default_rng(23)
    x = t64(g.standard_normal((5, 3)), requires_grad=True)
    idx = np.array([4, 0, 0, 2])
    out = T.gather_rows(x, idx)
    np.testing.assert_allclose(out.data, x.data[idx])
    coef = t64(g.standard_normal((4, 3)))
    assert fd_max_err(lambda: T.tsum(T.mul(T.gather_rows(x, idx), coef)), [x]) < 5e-6


def test_transpose_and_reshape_gradients():
    g = np.random.default_rng(24)
    x = t64(g.standard_normal((3, 4)), requires_grad=True)
    coef = t64(g.standard_normal((2, 6)))

    def f():
        return T.tsum(T.mul(T.reshape(T.transpose(x), (2, 6)), coef))

    assert fd_max_err(f, [x]) < 5e-6


def test_add_rejects_incompatible_shapes():
    with pytest.raises(ValueError, match="incompatible"):
        T.add(t64(np.zeros((2, 3))), t64(np.zeros((3, 2))))


def test_mixed_dtype_rejected():
    a = T.Tensor(np.zeros(3, dtype=np.float32))
    b = T.Tensor(np.zeros(3, dtype=np.float64))
    with pytest.raises(TypeError, match="mixed dtypes"):
        T.add(a, b)


# ---------------------------------------------------------------------------
# tape mechanics


def test_tape_records_in_append_order_and_reuses_tensors():
    x = t64([2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)       # x reused twice by one node
        z = T.add(y, x)       # diamond: x feeds two nodes
        loss = T.tsum(z)
    assert [n.tag for n in tape.nodes] == ["mul", "add", "sum"]
    T.backward(loss, tape)
    # d/dx (x*x + x) = 2x + 1 = 5
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_requires_scalar_loss():
    x = t64(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(y, tape)


def test_no_recording_without_grad_inputs():
    x = t64(np.ones(3))
    with T.Tape() as tape:
        y = T.mul(x, x)
    assert len(tape) == 0
    assert not y.requires_grad


def test_nested_tapes_rejected():
    with T.Tape():
        with pytest.raises(RuntimeError, match="already active"):
            with T.Tape():
                pass


def test_grad_accumulates_across_backward_calls():
    x = t64([3.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.mul(x, x))
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [6.0])
    x.zero_grad()
    assert x.grad is None


def test_finite_diff_check_detects_correct_gradient():
    g = np.random.default_rng(25)
    w = t64(g.standard_normal(5), requires_grad=True)

    def f():
        return T.tsum(T.mul(w, w))

    assert T.finite_diff_check(f, [w], eps=1e-5) < 5e-6
