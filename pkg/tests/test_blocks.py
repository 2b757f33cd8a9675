import numpy as np
import pytest

from laplamba import blocks, ops
from laplamba.errors import ConfigError, DimensionError
from laplamba.gradcheck import check_gradients, weighted_sum_loss
from laplamba.tensor import Tensor


def rand(rng, shape):
    return Tensor(rng.standard_normal(shape))


def zero_params(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


# ---------------------------------------------------------------- MDFM
def test_mdfm_collapse_and_convexity():
    rng = np.random.default_rng(0)
    m = blocks.MDFM(rng, 4)
    fs, fl = rand(rng, (2, 4, 6, 6)), rand(rng, (2, 4, 6, 6))
    m.fusion_stub = 1.0
    assert np.array_equal(m(fs, fl).data, fl.data)
    m.fusion_stub = 0.0
    assert np.array_equal(m(fs, fl).data, fs.data)
    m.fusion_stub = None
    out = m(fs, fl).data
    lo, hi = np.minimum(fs.data, fl.data), np.maximum(fs.data, fl.data)
    assert np.all(out >= lo - 1e-15) and np.all(out <= hi + 1e-15)
    np.testing.assert_allclose(m(fs, fs).data, fs.data, rtol=1e-14, atol=1e-15)
    w = m.weight_map(fs, fl).data
    assert np.all((w > 0) & (w < 1))
    with pytest.raises(DimensionError):
        m(fs, rand(rng, (2, 4, 6, 5)))


# ---------------------------------------------------------------- attention / residual
def test_channel_attention_zero_weights():
    ca = blocks.ChannelAttention(np.random.default_rng(1), 4)
    zero_params(ca)
    np.testing.assert_array_equal(ca(rand(np.random.default_rng(2), (2, 4, 5, 5))).data, 0.5)


def test_channel_attention_hand_case():
    ca = blocks.ChannelAttention(np.random.default_rng(3), 2, reduction=1)
    w1, b1 = np.array([[1.0, -2.0], [0.5, 0.5]]), np.array([0.1, -0.3])
    w2, b2 = np.array([[2.0, -1.0], [-0.5, 1.5]]), np.array([0.0, 0.2])
    ca.fc1.weight.data[...] = w1
    ca.fc1.bias.data[...] = b1
    ca.fc2.weight.data[...] = w2
    ca.fc2.bias.data[...] = b2
    x = np.random.default_rng(4).standard_normal((1, 2, 3, 3))
    mean = x.mean(axis=(2, 3))[0]
    ref = 1 / (1 + np.exp(-(w2 @ np.maximum(w1 @ mean + b1, 0) + b2)))
    np.testing.assert_allclose(ca(Tensor(x)).data.ravel(), ref, rtol=1e-14)


def test_res_group_shortcut_and_gradients():
    rng = np.random.default_rng(5)
    rg = blocks.ResGroup(rng, 3)
    x = Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True)
    res = check_gradients(lambda: weighted_sum_loss(rg(x)), [("x", x)] + list(rg.named_parameters()))
    assert res.passed, res.worst
    zero_params(rg)
    assert np.array_equal(rg(x).data, x.data)


# ---------------------------------------------------------------- GFFN
def gffn_reference(m, z):
    """The same pipeline spelled out with raw ops."""
    y = ops.layer_norm(z, m.norm.weight, m.norm.bias)
    y = ops.linear(y, m.pw.weight, m.pw.bias, axis=1)
    y = ops.conv2d(y, m.dw1.weight, m.dw1.bias, padding=1, groups=m.hidden)
    f1, f2 = ops.split(y, 2, axis=1)
    y = ops.conv2d(ops.mul(f1, f2), m.dw2.weight, m.dw2.bias, padding=1, groups=m.hidden // 2)
    return y


def test_gffn_compositional_oracle():
    rng = np.random.default_rng(6)
    m = blocks.GFFN(rng, 8)
    z = rand(rng, (1, 8, 4, 4))
    assert np.max(np.abs(m(z).data - gffn_reference(m, z).data)) <= 1e-10


def test_gffn_gate_identity_and_zero():
    rng = np.random.default_rng(7)
    m = blocks.GFFN(rng, 4)
    x = rand(rng, (1, 8, 3, 3))
    half = Tensor(np.ones((1, 4, 3, 3)))
    gated = m.simple_gate(ops.concat([ops.split(x, 2)[0], half], axis=1))
    assert np.array_equal(gated.data, x.data[:, :4])
    for mod in (m.pw, m.dw1, m.dw2):
        mod.bias.data[...] = 0.0
    m.norm.bias.data[...] = 0.0
    np.testing.assert_array_equal(m(Tensor(np.zeros((1, 4, 3, 3)))).data, 0.0)
    with pytest.raises(ConfigError):
        blocks.GFFN(rng, 3, expansion=1)


# ---------------------------------------------------------------- LSRB
def test_lsrb_collapses():
    rng = np.random.default_rng(8)
    m = blocks.LSRB(rng, 4, nstate=4)
    x = rand(rng, (1, 4, 4, 4))
    m.beta.data[...] = 0.0
    m.gamma.data[...] = 0.0
    composed = m.gffn(m.vssm(m.norm(x)))
    assert np.max(np.abs(m(x).data - composed.data)) <= 1e-12
    m.beta.data[...] = 1.0
    m.gamma.data[...] = 0.7
    zero_params(m.vssm.out_proj)
    zero_params(m.gffn.dw2)
    np.testing.assert_allclose(m(x).data, 0.7 * x.data, rtol=1e-15)


def test_lsrb_gradients():
    rng = np.random.default_rng(9)
    m = blocks.LSRB(rng, 4, nstate=4)
    m.beta.data[...] = 0.8
    m.gamma.data[...] = 1.3
    x = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    res = check_gradients(lambda: weighted_sum_loss(m(x)), [("x", x)] + list(m.named_parameters()),
                          max_coords=24)
    assert res.passed, res.worst


# ---------------------------------------------------------------- pixel attention / HDEB
def test_pixel_attention_properties():
    rng = np.random.default_rng(10)
    pa = blocks.PixelAttention(rng, 4, 2)
    g = pa.gate(Tensor(np.full((1, 4, 8, 8), 0.3))).data
    assert np.all(g == g[:, :, :1, :1])
    g = pa.gate(rand(rng, (2, 4, 8, 8))).data
    assert np.all((g > 0) & (g < 1))
    with pytest.raises(DimensionError):
        pa.gate(rand(rng, (1, 4, 7, 8)))
    one = blocks.PixelAttention(rng, 4, 1)
    x = rand(rng, (1, 4, 3, 3))
    ref = ops.sigmoid(one.fc2(ops.relu(one.fc1(x)))).data
    np.testing.assert_array_equal(one.gate(x).data, ref)


def test_hdeb_stub_and_zero_input():
    rng = np.random.default_rng(11)
    m = blocks.HDEB(rng, 4)
    guide, fh = rand(rng, (1, 4, 8, 8)), rand(rng, (1, 4, 8, 8))
    m.gate_stub = 1.0
    ref = m.gffn(m.conv(ops.relu(m.detail_conv(fh))))
    assert np.array_equal(m(guide, fh).data, ref.data)
    m.gate_stub = None
    for name, p in m.named_parameters():
        if name.endswith("bias") or name.endswith("beta"):
            p.data[...] = 0.0
    np.testing.assert_array_equal(m(guide, Tensor(np.zeros((1, 4, 8, 8)))).data, 0.0)
    with pytest.raises(DimensionError):
        m(rand(rng, (1, 4, 4, 4)), fh)
    with pytest.raises(ConfigError):
        blocks.HDEB(rng, 4, dconv="separable")


def test_hdeb_gradients_both_inputs():
    rng = np.random.default_rng(12)
    m = blocks.HDEB(rng, 4, dconv="dilated")
    g = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True)
    h = Tensor(rng.standard_normal((1, 4, 8, 8)), requires_grad=True)
    res = check_gradients(lambda: weighted_sum_loss(m(g, h)), [("guide", g), ("high", h)], max_coords=48)
    assert res.passed, res.worst


def test_blocks_preserve_shape():
    rng = np.random.default_rng(13)
    x = rand(rng, (2, 8, 8, 8))
    assert blocks.LSRB(rng, 8).forward(x).shape == x.shape
    assert blocks.HDEB(rng, 8)(x, x).shape == x.shape
    assert blocks.MDFM(rng, 8)(x, x).shape == x.shape
