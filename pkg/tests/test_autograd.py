import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikingedn.autograd import (
    BatchNorm2d,
    ConvBN,
    Parameter,
    ShapeError,
    StateError,
    Tensor,
    batch_norm,
    concat,
    conv2d,
    fold_bn_into_conv,
    global_avg_pool,
    gradcheck,
    no_grad,
    precision,
    softmax,
    upsample_average,
    upsample_nearest,
)
from spikingedn.autograd.functional import conv_output_size, linear_interp_matrix


def naive_conv(x, w, stride=1, dilation=1, padding=0):
    B, cin, H, W = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((B, cout, Ho, Wo))
    for b in range(B):
        for o in range(cout):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                out[b, o, i, j] += (w[o, c, di, dj]
                                                    * xp[b, c, i * stride + di * dilation, j * stride + dj * dilation])
    return out


def param(a):
    return Parameter(np.array(a, dtype=np.float64))


# -- conv2d ------------------------------------------------------------------------


def test_conv_zero_input_gives_zero():
    w = Tensor(np.random.default_rng(0).standard_normal((3, 2, 3, 3)))
    assert not conv2d(Tensor(np.zeros((1, 2, 5, 5))), w, padding=1).data.any()


def test_conv_single_element():
    out = conv2d(Tensor(np.array([[[[2.0]]]])), Tensor(np.array([[[[3.0]]]])))
    assert out.data.tolist() == [[[[6.0]]]]


def test_conv_dilated_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), dilation=2, padding=2).data
    np.testing.assert_allclose(out, naive_conv(x, w, dilation=2, padding=2), atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(k=st.sampled_from([1, 2, 3, 5]), stride=st.integers(1, 3), dilation=st.integers(1, 3),
       padding=st.integers(0, 3), size=st.integers(5, 9), seed=st.integers(0, 10_000))
def test_conv_shapes_and_values_match_oracle(k, stride, dilation, padding, size, seed):
    r = np.random.default_rng(seed)
    Ho = conv_output_size(size, k, stride, dilation, padding)
    x = r.standard_normal((2, 2, size, size))
    w = r.standard_normal((3, 2, k, k))
    if Ho < 1:
        with pytest.raises(ShapeError):
            conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dilation, padding=padding)
        return
    out = conv2d(Tensor(x), Tensor(w), stride=stride, dilation=dilation, padding=padding).data
    assert out.shape == (2, 3, Ho, Ho)
    np.testing.assert_allclose(out, naive_conv(x, w, stride, dilation, padding), atol=1e-9)


def test_conv_channel_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))


@pytest.mark.parametrize("k,stride,dilation,padding", [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 2, 2), (1, 1, 1, 0), (5, 2, 1, 2)])
def test_conv_gradients_match_finite_differences(rng, k, stride, dilation, padding):
    x = param(rng.standard_normal((2, 2, 7, 7)))
    w = param(rng.standard_normal((3, 2, k, k)))
    b = param(rng.standard_normal(3))
    probe = rng.standard_normal(conv2d(x, w, b, stride, dilation, padding).shape)

    res = gradcheck(lambda: (conv2d(x, w, b, stride, dilation, padding) * Tensor(probe)).sum(), [x, w, b],
                    n_coords=60, rng=rng)
    assert res.max_rel_error < 1e-6


# -- batch norm and folding ---------------------------------------------------------------


def test_bn_constant_channel_gives_shift():
    x = Tensor(np.ones((2, 2, 3, 3)) * np.array([3.0, -1.0]).reshape(1, 2, 1, 1))
    out = batch_norm(x, param([2.0, 2.0]), param([0.5, -0.25]), np.zeros(2), np.ones(2), True)
    np.testing.assert_allclose(out.data[:, 0], 0.5)
    np.testing.assert_allclose(out.data[:, 1], -0.25)


def test_bn_identity_in_inference(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = batch_norm(Tensor(x), param(np.ones(3)), param(np.zeros(3)), np.zeros(3), np.ones(3), False, eps=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-6)
    # the default eps scales by 1/sqrt(1 + 1e-5)
    out = batch_norm(Tensor(x), param(np.ones(3)), param(np.zeros(3)), np.zeros(3), np.ones(3), False)
    np.testing.assert_allclose(out.data, x, rtol=6e-6)


def test_bn_train_statistics(rng):
    x = rng.standard_normal((4, 3, 6, 6)) * 3 + 2
    gamma, beta = np.array([0.5, 1.0, 2.0]), np.array([-1.0, 0.0, 3.0])
    out = batch_norm(Tensor(x), param(gamma), param(beta), np.zeros(3), np.ones(3), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), gamma, atol=1e-4)


def test_bn_updates_running_stats_with_momentum(rng):
    x = rng.standard_normal((2, 2, 4, 4)) + 5
    rm, rv = np.zeros(2), np.ones(2)
    batch_norm(Tensor(x), param(np.ones(2)), param(np.zeros(2)), rm, rv, True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    n = x.size // 2
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_bn_channel_mismatch():
    with pytest.raises(ShapeError):
        batch_norm(Tensor(np.zeros((1, 3, 2, 2))), param(np.ones(2)), param(np.zeros(2)), np.zeros(2), np.ones(2), True)


def test_bn_gradients(rng):
    x = param(rng.standard_normal((2, 3, 4, 4)))
    g, b = param(rng.uniform(0.5, 1.5, 3)), param(rng.standard_normal(3))
    probe = Tensor(rng.standard_normal((2, 3, 4, 4)))
    res = gradcheck(lambda: (batch_norm(x, g, b, np.zeros(3), np.ones(3), True) * probe).sum(), [x, g, b],
                    n_coords=50, rng=rng)
    assert res.max_rel_error < 1e-5


def test_fold_identity_stats_is_noop(rng):
    bn = BatchNorm2d(2, eps=0.0).train(False)
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    wf, bf = fold_bn_into_conv(w, b, bn)
    np.testing.assert_array_equal(wf, w)
    np.testing.assert_array_equal(bf, b)


def test_fold_single_channel_analytic():
    bn = BatchNorm2d(1, eps=1e-12).train(False)
    bn.running_var[:] = 4.0
    bn.gamma.data[:] = 2.0
    w = np.full((1, 1, 1, 1), 0.7)
    wf, _ = fold_bn_into_conv(w, None, bn)
    np.testing.assert_allclose(wf / w, 1.0)


def test_fold_refused_in_train_mode():
    with pytest.raises(StateError):
        fold_bn_into_conv(np.ones((1, 1, 1, 1)), None, BatchNorm2d(1))


def test_folded_convbn_matches_unfolded(rng):
    cb = ConvBN(3, 4, 3, rng=rng)
    for _ in range(3):
        cb(Tensor(rng.standard_normal((4, 3, 6, 6)) * 2 + 1))
    cb.bn.gamma.data[:] = rng.uniform(0.5, 2, 4)
    cb.bn.beta.data[:] = rng.standard_normal(4)
    cb.eval()
    x = Tensor(rng.standard_normal((2, 3, 6, 6)))
    ref = cb(x).data
    cb.fold()
    assert np.abs(cb(x).data - ref).max() < 1e-5
    cb.train()
    assert not cb.folded


# -- upsampling ------------------------------------------------------------------------


def test_nearest_replicates_blocks():
    out = upsample_nearest(Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]])), 2).data[0, 0]
    expect = np.kron(np.eye(2), np.ones((2, 2)))
    np.testing.assert_array_equal(out, expect)


@given(st.integers(0, 2**16))
def test_nearest_keeps_binary(seed):
    x = (np.random.default_rng(seed).random((1, 2, 3, 3)) < 0.5).astype(float)
    out = upsample_nearest(Tensor(x), 2).data
    assert set(np.unique(out)) <= {0.0, 1.0}


def reference_bilinear(img, factor):
    """Half-pixel bilinear upsampling coded directly from its definition."""
    H, W = img.shape
    out = np.zeros((H * factor, W * factor))
    for i in range(H * factor):
        for j in range(W * factor):
            sy = min(max((i + 0.5) / factor - 0.5, 0), H - 1)
            sx = min(max((j + 0.5) / factor - 0.5, 0), W - 1)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
                         + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])
    return out


def test_average_upsample_delta_matches_reference():
    img = np.zeros((4, 4))
    img[1, 2] = 1.0
    out = upsample_average(Tensor(img[None, None]), 2).data[0, 0]
    np.testing.assert_allclose(out, reference_bilinear(img, 2), atol=1e-6)


def test_average_upsample_keeps_channels_apart(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    out = upsample_average(Tensor(x), 4).data
    for c in range(3):
        np.testing.assert_allclose(out[1, c], reference_bilinear(x[1, c], 4), atol=1e-9)


def test_interp_rows_sum_to_one():
    np.testing.assert_allclose(linear_interp_matrix(5, 4).sum(axis=1), 1.0)


def test_upsample_factor_must_be_two_or_more():
    with pytest.raises(ValueError):
        upsample_nearest(Tensor(np.zeros((1, 1, 2, 2))), 1)
    with pytest.raises(ValueError):
        upsample_average(Tensor(np.zeros((1, 1, 2, 2))), 1)


# -- misc primitives ---------------------------------------------------------------------


def test_concat_channels():
    out = concat([Tensor(np.zeros((1, 64, 2, 2))), Tensor(np.ones((1, 64, 2, 2)))])
    assert out.shape == (1, 128, 2, 2)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        concat([Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 3, 2)))])


def test_softmax_equal_logits():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6))
def test_softmax_sums_to_one(logits):
    s = softmax(Tensor(np.array(logits))).data
    assert abs(s.sum() - 1) < 1e-9 and np.all(s >= 0)


def test_random_scalar_graph_gradients(rng):
    a = param(rng.standard_normal((3, 4)))
    b = param(rng.uniform(0.5, 2.0, (4,)))
    c = param(rng.standard_normal((2, 3, 1, 1)))

    def loss():
        h = (a * b - a / b).exp() + (b * b).log()
        s = softmax(h, axis=-1)
        z = global_avg_pool(c * Tensor(np.ones((2, 3, 2, 2)))) * 3.0
        return (s * s).sum() + z.sum() * (a[0, 1] + 1.0) - (h.mean() - 0.5) * 2.0

    res = gradcheck(loss, [a, b, c], n_coords=None)
    assert res.max_rel_error < 1e-3


def test_backward_reaches_every_leaf(rng):
    xs = [param(rng.standard_normal(3)) for _ in range(4)]
    loss = ((xs[0] * xs[1]).sum() + concat([xs[2][None], xs[3][None]], axis=0).sum())
    loss.backward()
    assert all(x.grad is not None and x.grad.shape == x.shape for x in xs)


def test_no_grad_records_nothing(rng):
    x = param(rng.standard_normal(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_precision_switch():
    with precision(np.float32):
        assert Tensor([1.0]).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


def test_determinism(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    a = conv2d(Tensor(x), Tensor(w), padding=1).data
    b = conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()
