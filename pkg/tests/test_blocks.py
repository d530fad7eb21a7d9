import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcap import tensor as T
from dcap.blocks import (AaSPBlock, C3Block, ConvBlock, ConvParams, MDRCBlock, SEAttention,
                         SPPFBlock, SSCABlock)
from dcap.errors import ShapeError
from dcap.tensor import Tensor

from oracles import naive_conv2d, naive_maxpool


def rng_of(seed):
    return np.random.default_rng(seed)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def np_silu(v):
    return v / (1.0 + np.exp(-v))


def np_sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def conv_ref(cb: ConvBlock, x):
    p = cb.params
    y = naive_conv2d(x, p.weight.data, p.bias.data, p.stride, p.padding, p.dilation)
    return np_silu(y) if cb.activation == "silu" else y


# -- ConvParams / ConvBlock -----------------------------------------------------

def test_conv_params_invariants():
    with pytest.raises(ShapeError):
        ConvParams(t64(np.zeros((1, 1, 3, 2))), t64(np.zeros(1)))
    with pytest.raises(ValueError):
        ConvParams(t64(np.zeros((1, 1, 3, 3))), t64(np.zeros(1)), stride=0)
    p = ConvParams.create(2, 3, 3, rng_of(0), dilation=3)
    assert p.padding == 3 and p.cin == 2 and p.cout == 3 and p.k == 3
    assert not p.bias.data.any()


def test_kaiming_uniform_bound():
    p = ConvParams.create(4, 64, 3, rng_of(1), dtype=np.float64)
    bound = np.sqrt(6.0 / 36)
    assert np.abs(p.weight.data).max() <= bound
    assert np.abs(p.weight.data).max() > 0.9 * bound


def test_conv_block_matches_oracle():
    cb = ConvBlock.create(2, 3, 3, rng_of(2), stride=2, dilation=2, dtype=np.float64)
    x = rng_of(3).normal(size=(1, 2, 9, 9))
    np.testing.assert_allclose(cb(t64(x)).data, conv_ref(cb, x), atol=1e-12)


# -- MDRC ---------------------------------------------------------------------------

def test_mdrc_zero_parameters_is_identity():
    block = MDRCBlock.create(3, 3, rng_of(4), dtype=np.float64)
    block.zero_()
    x = rng_of(5).normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(block(t64(x)).data, x)


def test_mdrc_shape_without_residual():
    block = MDRCBlock.create(4, 8, rng_of(6))
    assert not block.residual
    assert block(Tensor(np.zeros((1, 4, 16, 16), np.float32))).shape == (1, 8, 16, 16)
    assert not MDRCBlock.create(4, 4, rng_of(6), stride=2).residual


def test_mdrc_matches_straight_line_oracle():
    block = MDRCBlock.create(2, 2, rng_of(7), dtype=np.float64)
    for b in block.branches:
        b.params.bias.data[:] = rng_of(8).normal(size=b.params.bias.shape)
    x = rng_of(9).normal(size=(1, 2, 8, 8))
    branches = [conv_ref(b, x) for b in block.branches]
    expected = x + conv_ref(block.fuse, np.concatenate(branches, axis=1))
    np.testing.assert_allclose(block(t64(x)).data, expected, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 4), h=st.integers(4, 32), stride=st.sampled_from([1, 2]))
def test_mdrc_branches_share_extent(d, h, stride):
    block = MDRCBlock.create(1, 2, rng_of(d), dilations=(1, d), stride=stride)
    x = Tensor(np.zeros((1, 1, h, h), np.float32))
    expected = (h - 1) // stride + 1
    for b in block.branches:
        assert b(x).shape[2:] == (expected, expected)
    assert block(x).shape == (1, 2, expected, expected)


def test_mdrc_rejects_bad_input():
    with pytest.raises(ValueError):
        MDRCBlock.create(2, 2, rng_of(0), dilations=())
    with pytest.raises(ShapeError):
        MDRCBlock.create(2, 2, rng_of(0))(Tensor(np.zeros((1, 3, 4, 4), np.float32)))


# -- SE -----------------------------------------------------------------------------

def test_se_zero_w2_halves_input():
    se = SEAttention.create(4, rng_of(10), dtype=np.float64)
    se.w2.data[:] = 0
    x = rng_of(11).normal(size=(2, 4, 3, 3))
    np.testing.assert_array_equal(se(t64(x)).data, 0.5 * x)


def test_se_zero_channel_stays_zero():
    se = SEAttention.create(3, rng_of(12), dtype=np.float64)
    x = rng_of(13).normal(size=(1, 3, 4, 4))
    x[0, 1] = 0
    assert not se(t64(x)).data[0, 1].any()


def test_se_matches_scalar_formulas():
    se = SEAttention.create(3, rng_of(14), dtype=np.float64)
    for p in se.parameters():
        p.data[:] = rng_of(15).normal(scale=0.5, size=p.shape)
    x = rng_of(16).normal(size=(1, 3, 2, 2))
    hidden = se.w1.shape[1]
    z = [sum(x[0, c, i, j] for i in range(2) for j in range(2)) / 4 for c in range(3)]
    h = [max(0.0, sum(z[c] * se.w1.data[c, k] for c in range(3)) + se.b1.data[k]) for k in range(hidden)]
    s = [1 / (1 + np.exp(-(sum(h[k] * se.w2.data[k, c] for k in range(hidden)) + se.b2.data[c])))
         for c in range(3)]
    expected = x * np.array(s).reshape(1, 3, 1, 1)
    np.testing.assert_allclose(se(t64(x)).data, expected, atol=1e-12)


def test_se_hidden_width_clamps():
    assert SEAttention.create(8, rng_of(0)).w1.shape == (8, 1)
    assert SEAttention.create(64, rng_of(0)).w1.shape == (64, 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), scale=st.floats(0.01, 50.0))
def test_se_gates_strictly_inside_unit_interval(seed, scale):
    se = SEAttention.create(4, rng_of(seed), dtype=np.float64)
    x = rng_of(seed + 1).normal(size=(1, 4, 3, 3))
    s = se.gates(t64(x)).data
    assert np.all(s > 0) and np.all(s < 1)
    # a positive per-channel rescale scales z by the same constant
    c = np.array([scale, 1.0, 2.0, 0.5]).reshape(1, 4, 1, 1)
    z = T.global_avg_pool(t64(x * c)).data
    np.testing.assert_allclose(z, T.global_avg_pool(t64(x)).data * c, rtol=1e-12, atol=1e-15)
    s2 = se.gates(t64(x * c)).data
    assert np.all(s2 > 0) and np.all(s2 < 1)


# -- SSCA ---------------------------------------------------------------------------

def test_ssca_zero_parameters_quarter_input():
    block = SSCABlock.create(3, rng_of(17), dtype=np.float64)
    block.zero_()
    x = rng_of(18).normal(size=(2, 3, 5, 5))
    np.testing.assert_array_equal(block(t64(x)).data, 0.25 * x)


def test_ssca_zero_input():
    block = SSCABlock.create(2, rng_of(19), dtype=np.float64)
    assert not block(t64(np.zeros((1, 2, 4, 4)))).data.any()


def test_ssca_matches_loop_oracle():
    block = SSCABlock.create(2, rng_of(20), dtype=np.float64)
    for p in block.parameters():
        p.data[:] = rng_of(21).normal(scale=0.3, size=p.shape)
    x = rng_of(22).normal(size=(1, 2, 4, 4))
    sc, cc = block.spatial_conv, block.channel_conv
    ms = np_sigmoid(naive_conv2d(x, sc.weight.data, sc.bias.data, 1, 3, 1))
    pooled = x.mean(axis=(2, 3), keepdims=True)
    mc = np_sigmoid(naive_conv2d(pooled, cc.weight.data, cc.bias.data))
    expected = np.empty_like(x)
    for c in range(2):
        for i in range(4):
            for j in range(4):
                expected[0, c, i, j] = x[0, c, i, j] * ms[0, 0, i, j] * mc[0, c, 0, 0]
    np.testing.assert_allclose(block(t64(x)).data, expected, atol=1e-12)
    ms_t, mc_t = block.maps(t64(x))
    assert ms_t.shape == (1, 1, 4, 4) and mc_t.shape == (1, 2, 1, 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), h=st.integers(1, 9))
def test_ssca_output_bounded_and_shape_preserving(seed, h):
    block = SSCABlock.create(3, rng_of(seed), dtype=np.float64)
    x = rng_of(seed + 7).normal(scale=3.0, size=(1, 3, h, h))
    y = block(t64(x)).data
    assert y.shape == x.shape
    assert np.all(np.abs(y) <= np.abs(x))


# -- AaSP ---------------------------------------------------------------------------

def test_aasp_shape():
    block = AaSPBlock.create(8, 8, rng_of(23))
    assert block(Tensor(np.zeros((1, 8, 16, 16), np.float32))).shape == (1, 8, 16, 16)


def test_aasp_zero_se_halves_fused_map():
    block = AaSPBlock.create(4, 4, rng_of(24), dtype=np.float64)
    block.se.zero_()
    x = rng_of(25).normal(size=(1, 4, 6, 6))
    x1 = conv_ref(block.reduce, x)
    fused = conv_ref(block.fuse, np.concatenate([x1, naive_maxpool(x1, 5, 1, 2),
                                                 naive_maxpool(naive_maxpool(x1, 5, 1, 2), 9, 1, 4)], axis=1))
    np.testing.assert_allclose(block(t64(x)).data, 0.5 * fused, atol=1e-12)


def test_aasp_matches_straight_line_oracle():
    block = AaSPBlock.create(4, 4, rng_of(26), dtype=np.float64)
    for p in block.se.parameters():
        p.data[:] = rng_of(27).normal(scale=0.5, size=p.shape)
    x = rng_of(28).normal(size=(1, 4, 8, 8))
    x1 = conv_ref(block.reduce, x)
    y1 = naive_maxpool(x1, 5, 1, 2)
    y2 = naive_maxpool(y1, 9, 1, 4)
    fused = conv_ref(block.fuse, np.concatenate([x1, y1, y2], axis=1))
    z = fused.mean(axis=(2, 3))
    s = np_sigmoid(np.maximum(z @ block.se.w1.data + block.se.b1.data, 0) @ block.se.w2.data + block.se.b2.data)
    np.testing.assert_allclose(block(t64(x)).data, fused * s[:, :, None, None], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12))
def test_pooling_blocks_preserve_extent(h, w):
    x = Tensor(np.random.default_rng(h * 13 + w).normal(size=(1, 4, h, w)).astype(np.float32))
    assert AaSPBlock.create(4, 6, rng_of(0))(x).shape == (1, 6, h, w)
    assert SPPFBlock.create(4, 6, rng_of(0))(x).shape == (1, 6, h, w)
    assert SSCABlock.create(4, rng_of(0))(x).shape == (1, 4, h, w)


# -- SPPF ---------------------------------------------------------------------------

def test_sppf_shape_and_constant_bias_output():
    block = SPPFBlock.create(8, 8, rng_of(29), dtype=np.float64)
    assert block(t64(np.zeros((1, 8, 16, 16)))).shape == (1, 8, 16, 16)
    block.fuse.params.weight.data[:] = 0
    block.fuse.params.bias.data[:] = np.arange(8) * 0.1
    y = block(t64(np.full((1, 8, 5, 5), 2.0))).data
    np.testing.assert_allclose(y, np_silu(np.arange(8) * 0.1).reshape(1, 8, 1, 1) * np.ones((1, 8, 5, 5)),
                               atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_chained_pools_equal_parallel_pools(seed):
    x = rng_of(seed).normal(size=(2, 3, 11, 13))
    p5 = T.maxpool2d(t64(x), 5, 1, 2)
    p55 = T.maxpool2d(p5, 5, 1, 2)
    p555 = T.maxpool2d(p55, 5, 1, 2)
    np.testing.assert_array_equal(p5.data, naive_maxpool(x, 5, 1, 2))
    np.testing.assert_array_equal(p55.data, naive_maxpool(x, 9, 1, 4))
    np.testing.assert_array_equal(p555.data, naive_maxpool(x, 13, 1, 6))


# -- C3 -----------------------------------------------------------------------------

def test_c3_shape():
    block = C3Block.create(4, 4, rng_of(30), n=1)
    assert block(Tensor(np.zeros((1, 4, 8, 8), np.float32))).shape == (1, 4, 8, 8)
    block = C3Block.create(4, 6, rng_of(30), n=2, use_mdrc=True)
    assert block(Tensor(np.zeros((1, 4, 8, 8), np.float32))).shape == (1, 6, 8, 8)


def test_c3_zero_weights_matches_oracle():
    block = C3Block.create(4, 4, rng_of(31), n=1, dtype=np.float64)
    block.zero_()
    for cb in (block.cv1, block.cv2, block.cv3):
        cb.params.bias.data[:] = rng_of(32).normal(size=cb.params.bias.shape)
    x = rng_of(33).normal(size=(1, 4, 6, 6))
    # the bottleneck adds silu(0) == 0 to its pass-through input
    a = np_silu(np.broadcast_to(block.cv1.params.bias.data.reshape(1, -1, 1, 1), (1, 2, 6, 6)))
    b = np_silu(np.broadcast_to(block.cv2.params.bias.data.reshape(1, -1, 1, 1), (1, 2, 6, 6)))
    expected = np_silu(naive_conv2d(np.concatenate([a, b], axis=1), block.cv3.params.weight.data,
                                    block.cv3.params.bias.data))
    np.testing.assert_allclose(block(t64(x)).data, expected, atol=1e-12)


def test_c3_matches_straight_line_oracle():
    block = C3Block.create(3, 4, rng_of(34), n=1, use_mdrc=True, dtype=np.float64)
    x = rng_of(35).normal(size=(1, 3, 7, 7))
    a = conv_ref(block.cv1, x)
    unit = block.m[0]
    inner = conv_ref(unit.cv1, a)
    mdrc = unit.cv2
    f = conv_ref(mdrc.fuse, np.concatenate([conv_ref(b, inner) for b in mdrc.branches], axis=1))
    a = a + (inner + f)
    expected = conv_ref(block.cv3, np.concatenate([a, conv_ref(block.cv2, x)], axis=1))
    np.testing.assert_allclose(block(t64(x)).data, expected, atol=1e-12)


# -- gradients ----------------------------------------------------------------------

@pytest.mark.parametrize("make,shape", [
    (lambda r: MDRCBlock.create(2, 2, r, dtype=np.float64), (1, 2, 6, 6)),
    (lambda r: SEAttention.create(3, r, dtype=np.float64), (1, 3, 3, 3)),
    (lambda r: SSCABlock.create(2, r, dtype=np.float64), (1, 2, 4, 4)),
    (lambda r: AaSPBlock.create(2, 2, r, dtype=np.float64), (1, 2, 4, 4)),
    (lambda r: C3Block.create(2, 2, r, dtype=np.float64), (1, 2, 4, 4)),
])
def test_block_gradients(make, shape):
    rng = rng_of(36)
    block = make(rng)
    x = t64(rng.uniform(-1, 1, size=shape))
    proj = t64(rng.normal(size=block(x).shape))
    assert T.gradcheck(lambda v: (block(v) * proj).sum(), x, wrt=block.parameters()) <= 1e-4
