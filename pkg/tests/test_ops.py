import numpy as np
import pytest
from scipy.signal import correlate2d

from laplamba import ops
from laplamba.errors import ConfigError, DimensionError
from laplamba.gradcheck import check_gradients, weighted_sum_loss
from laplamba.tensor import Tensor


def leaf(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def conv_loops(x, w, b, stride, pad, dil, groups, mode):
    """Direct nested-loop cross-correlation."""
    npmode = {"zeros": "constant", "reflect": "reflect"}[mode]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=npmode)
    n, c, hp, wp = xp.shape
    o, cg, kh, kw = w.shape
    og = o // groups
    oh = (hp - dil * (kh - 1) - 1) // stride + 1
    ow = (wp - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[oc, ic, u, v] * xp[bi, g * cg + ic, i * stride + u * dil,
                                                         j * stride + v * dil]
                    out[bi, oc, i, j] = acc
    return out


def test_conv_ones_counts_overlap():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = ops.conv2d(x, w, padding=1).data[0, 0]
    assert y[1, 1] == 9.0 and y[0, 0] == 4.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 7))
    y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    assert np.max(np.abs(got - conv_loops(x, w, b, 1, 1, 1, 1, "zeros"))) <= 1e-10


@pytest.mark.parametrize("stride,pad,dil,groups,mode,k", [
    (2, 1, 1, 1, "zeros", 3),
    (1, 2, 2, 1, "reflect", 3),
    (1, 2, 1, 2, "reflect", 5),
    (2, 0, 1, 4, "zeros", 3),
    (1, 1, 1, 4, "reflect", 3),   # depthwise
    (2, 2, 2, 4, "zeros", 3),     # depthwise, strided and dilated
])
def test_conv_variants_match_oracle(stride, pad, dil, groups, mode, k):
    rng = np.random.default_rng(stride * 100 + dil * 10 + groups)
    c = 4
    o = 4 if groups == 4 else 6
    x = rng.standard_normal((2, c, 9, 7))
    w = rng.standard_normal((o, c // groups, k, k))
    b = rng.standard_normal(o)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad,
                     dilation=dil, groups=groups, padding_mode=mode).data
    assert np.max(np.abs(got - conv_loops(x, w, b, stride, pad, dil, groups, mode))) <= 1e-10


def test_depthwise_equals_per_channel_correlation():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((1, 5, 6, 6)), rng.standard_normal((5, 1, 3, 3))
    got = ops.conv2d(Tensor(x), Tensor(w), padding=1, groups=5).data[0]
    for ch in range(5):
        ref = correlate2d(x[0, ch], w[ch, 0], mode="same", boundary="fill")
        np.testing.assert_allclose(got[ch], ref, atol=1e-12)


def test_conv_float32_inference():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 4, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 1, 3, 3)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w), padding=1, groups=4)
    assert y.dtype == np.float32


def test_conv_errors():
    x = Tensor(np.ones((1, 4, 5, 5)))
    with pytest.raises(ConfigError):
        ops.conv2d(x, Tensor(np.ones((3, 2, 3, 3))), groups=3)
    with pytest.raises(DimensionError):
        ops.conv2d(x, Tensor(np.ones((2, 3, 3, 3))))
    with pytest.raises(ConfigError):
        ops.conv2d(x, Tensor(np.ones((2, 4, 3, 3))), padding=1, padding_mode="circular")


@pytest.mark.parametrize("kw", [
    dict(padding=1),
    dict(stride=2, padding=1, padding_mode="reflect"),
    dict(dilation=2, padding=2, groups=2),
    dict(padding=1, groups=4),
    dict(stride=2, padding=2, dilation=2, groups=4, padding_mode="reflect"),
])
def test_conv_gradients(kw):
    rng = np.random.default_rng(5)
    g = kw.get("groups", 1)
    x, w, b = leaf(rng, (2, 4, 7, 6)), leaf(rng, (4, 4 // g, 3, 3)), leaf(rng, (4,))
    res = check_gradients(lambda: weighted_sum_loss(ops.conv2d(x, w, b, **kw)),
                          [("x", x), ("w", w), ("b", b)])
    assert res.passed, res.worst


def test_pointwise_definitions():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ops.silu(Tensor(0.0)).item() == 0.0
    assert ops.sigmoid(Tensor(0.0)).item() == 0.5
    with pytest.raises(DimensionError):
        ops.mul(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_split_concat_identity():
    x = np.random.default_rng(6).standard_normal((2, 6, 3, 3))
    parts = ops.split(Tensor(x), 2, axis=1)
    assert ops.concat(parts, axis=1).data.tobytes() == x.tobytes()


def test_pointwise_gradients():
    rng = np.random.default_rng(7)
    a, b = leaf(rng, (2, 4, 3)), leaf(rng, (2, 4, 3))

    def fn():
        u = ops.mul(ops.silu(a), ops.sigmoid(b))
        v = ops.sub(ops.scale(ops.softplus(a), 0.5), ops.exp(ops.scale(b, 0.3)))
        w = ops.concat(ops.split(ops.add(u, v), 2, axis=1)[::-1], axis=1)
        return weighted_sum_loss(ops.mul(w, ops.relu(ops.add(a, 0.1))))

    res = check_gradients(fn, [("a", a), ("b", b)])
    assert res.passed, res.worst


def test_layer_norm_hand_values():
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1))
    y = ops.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    np.testing.assert_allclose(y.data.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_layer_norm_constant_and_affine_collapse():
    c = Tensor(np.full((2, 4, 3, 3), 7.0))
    y = ops.layer_norm(c, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(y.data, 0.0)
    x = Tensor(np.random.default_rng(8).standard_normal((2, 4, 3, 3)))
    y = ops.layer_norm(x, Tensor(np.zeros(4)), Tensor(np.full(4, 5.0)))
    np.testing.assert_array_equal(y.data, 5.0)


def test_layer_norm_moments_and_errors():
    x = np.random.default_rng(9).standard_normal((2, 6, 4, 5)) * 3 + 1
    y = ops.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6)), eps=1e-12).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-9)
    with pytest.raises(DimensionError):
        ops.layer_norm(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5)))


@pytest.mark.parametrize("axis", [1, -1])
def test_layer_norm_gradients(axis):
    rng = np.random.default_rng(10)
    x = leaf(rng, (2, 5, 3, 4))
    c = x.shape[axis]
    g, b = leaf(rng, (c,)), leaf(rng, (c,))
    res = check_gradients(lambda: weighted_sum_loss(ops.layer_norm(x, g, b, axis=axis)),
                          [("x", x), ("g", g), ("b", b)])
    assert res.passed, res.worst


def test_linear_hand_and_identity():
    y = ops.linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(y.data, [3.0, 2.0])
    x = np.random.default_rng(11).standard_normal((3, 4))
    np.testing.assert_array_equal(ops.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    with pytest.raises(DimensionError):
        ops.linear(Tensor(x), Tensor(np.ones((2, 5))))


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(12)
    x, w, b = rng.standard_normal((2, 3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    ref = np.zeros((2, 3, 4))
    for i in range(2):
        for j in range(3):
            for o in range(4):
                ref[i, j, o] = b[o] + sum(w[o, k] * x[i, j, k] for k in range(5))
    assert np.max(np.abs(ops.linear(Tensor(x), Tensor(w), Tensor(b)).data - ref)) <= 1e-10
    # channel-axis form on NCHW input
    xc = rng.standard_normal((2, 5, 3, 3))
    got = ops.linear(Tensor(xc), Tensor(w), Tensor(b), axis=1).data
    ref_c = np.einsum("ok,nkhw->nohw", w, xc) + b[None, :, None, None]
    assert np.max(np.abs(got - ref_c)) <= 1e-10


@pytest.mark.parametrize("axis", [-1, 1])
def test_linear_gradients(axis):
    rng = np.random.default_rng(13)
    shape = (2, 3, 4, 5) if axis == -1 else (2, 5, 4, 3)
    x, w, b = leaf(rng, shape), leaf(rng, (6, 5)), leaf(rng, (6,))
    res = check_gradients(lambda: weighted_sum_loss(ops.linear(x, w, b, axis=axis)),
                          [("x", x), ("w", w), ("b", b)])
    assert res.passed, res.worst


def test_pool_and_upsampling_gradients():
    rng = np.random.default_rng(14)
    x = leaf(rng, (1, 3, 8, 8))
    for fn in (lambda: weighted_sum_loss(ops.avg_pool2d(x, 4)),
               lambda: weighted_sum_loss(ops.upsample_nearest(x, 2)),
               lambda: weighted_sum_loss(ops.upsample_bilinear2x(x, (15, 16))),
               lambda: weighted_sum_loss(ops.pad2d(x, (1, 2, 2, 1), "reflect"))):
        res = check_gradients(fn, [("x", x)])
        assert res.passed, res.worst


def test_bilinear_upsample_matches_half_pixel_formula():
    x = np.random.default_rng(15).random((2, 3, 5, 7))
    out = ops.upsample_bilinear2x(Tensor(x)).data
    h, w = x.shape[2:]
    ref = np.zeros((2, 3, 2 * h, 2 * w))
    for i in range(2 * h):
        for j in range(2 * w):
            # output centre (i + 0.5) / 2 - 0.5 in input coordinates, clamped at the border
            yi, xj = np.clip((i + 0.5) / 2 - 0.5, 0, h - 1), np.clip((j + 0.5) / 2 - 0.5, 0, w - 1)
            y0, x0 = int(np.floor(yi)), int(np.floor(xj))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = yi - y0, xj - x0
            ref[..., i, j] = ((1 - fy) * ((1 - fx) * x[..., y0, x0] + fx * x[..., y0, x1])
                              + fy * ((1 - fx) * x[..., y1, x0] + fx * x[..., y1, x1]))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(ops.upsample_bilinear2x(Tensor(x), (9, 13)).data, out[..., :9, :13])


def test_avg_pool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(ops.avg_pool2d(Tensor(x), 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(DimensionError):
        ops.avg_pool2d(Tensor(np.ones((1, 1, 5, 4))), 2)


def test_reductions_and_reshape_gradients():
    rng = np.random.default_rng(15)
    x = leaf(rng, (2, 3, 4))

    def fn():
        y = ops.transpose(ops.reshape(x, (6, 4)), (1, 0))
        return ops.add(ops.sum(ops.mul(ops.mean(y, axis=1, keepdims=True),
                                       ops.mean(y, axis=1, keepdims=True))),
                       weighted_sum_loss(ops.getitem(x, (slice(None), 1))))

    res = check_gradients(fn, [("x", x)])
    assert res.passed, res.worst
