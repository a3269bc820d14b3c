import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_rel_error, numeric_grad
from rtfocuser import tensor as T
from rtfocuser.blocks import LAPLACIAN, LDBlock, MLIA, SNBranch, SPPF, XFuse
from rtfocuser.tensor import ShapeError


def randomize(layer, rng, scale=0.5):
    layer.assign_names("blk")
    for _, p in layer.named_parameters():
        p[...] = rng.standard_normal(p.shape) * scale
    return layer


def zero(layer):
    layer.assign_names("blk")
    for _, p in layer.named_parameters():
        p[...] = 0
    return layer


def conv(layer, x):
    return T.conv2d(x, layer.weight, layer.bias, layer.spec)


def check_grads(loss, analytic, rng, tol=1e-3, per_array=30):
    """``analytic``: list of (array, gradient) pairs; probes a random subset of entries."""
    for arr, g in analytic:
        idx = rng.choice(arr.size, size=min(per_array, arr.size), replace=False)
        num = numeric_grad(loss, arr, step=1e-3, idx=idx)
        err = max_rel_error(g, num, floor=1e-4)
        assert err < tol


# -- LD ---------------------------------------------------------------------

def test_ld_zero_trunk_is_identity(rng):
    blk = LDBlock(4, sn=False)
    zero(blk)
    blk.bn.state.gamma[:] = 1
    x = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
    np.testing.assert_array_equal(blk(x), x)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 9), w=st.integers(1, 9))
def test_ld_zero_trunk_identity_property(seed, h, w):
    blk = LDBlock(3, sn=False)
    zero(blk)
    x = np.random.default_rng(seed).standard_normal((2, 3, h, w)).astype(np.float32) * 10
    np.testing.assert_array_equal(blk(x), x)


def test_ld_shape():
    blk = LDBlock(16)
    x = np.zeros((2, 16, 32, 32), np.float32)
    assert blk(x).shape == (2, 16, 32, 32)
    assert blk.pw_expand.spec.out_channels == 64 and blk.pw_compress.spec.out_channels == 16


def test_ld_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        LDBlock(4)(np.zeros((1, 3, 4, 4), np.float32))


@pytest.mark.parametrize("sn", [True, False])
def test_ld_matches_composition(rng, sn):
    blk = randomize(LDBlock(4, sn=sn), rng)
    blk.bn.state.gamma[:] = np.abs(blk.bn.state.gamma) + 0.5
    x = rng.standard_normal((2, 4, 7, 5)).astype(np.float32)
    bn_state = T.BnState(blk.bn.state.gamma, blk.bn.state.beta, np.zeros(4, np.float32), np.ones(4, np.float32))
    t = conv(blk.pw_compress, conv(blk.pw_expand, T.batchnorm2d(T.gelu(conv(blk.dw, x)), bn_state)))
    if sn:
        t = t + T.conv2d(x, np.broadcast_to(LAPLACIAN, (4, 1, 3, 3)).astype(np.float32), None,
                         blk.sn.spec) * blk.sn.gain[None, :, None, None]
    assert np.abs((blk(x) - x) - t).max() < 1e-5


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_ld_grads(rng, mode):
    blk = randomize(LDBlock(4, dtype=np.float64), rng)
    blk.bn.state.running_var[:] = rng.uniform(0.5, 2, 4)
    blk.set_mode(mode)
    x = rng.standard_normal((2, 4, 8, 8))
    r = rng.standard_normal(x.shape)

    def loss():
        return float((blk(x) * r).sum())

    _, cache = blk.forward(x)
    grads = {}
    dx = blk.backward(cache, r, grads)
    pairs = [(x, dx)] + [(p, grads[n]) for n, p in blk.named_parameters()]
    assert len(pairs) == 1 + 9  # input, then dw w/b, bn g/b, expand w/b, compress w/b, sn gain
    check_grads(loss, pairs, rng)


def test_ld_grads_cover_every_parameter(rng):
    blk = randomize(LDBlock(4, dtype=np.float64), rng)
    x = rng.standard_normal((1, 4, 4, 4))
    _, cache = blk.forward(x)
    grads = {}
    blk.backward(cache, np.ones_like(x), grads)
    assert set(grads) == {n for n, _ in blk.named_parameters()}
    for n, p in blk.named_parameters():
        assert grads[n].shape == p.shape


# -- SN ---------------------------------------------------------------------

def test_laplacian_rows_and_total():
    assert LAPLACIAN.sum() == 0
    assert LAPLACIAN[1, 1] == -4


def test_sn_impulse():
    sn = SNBranch(1)
    sn.gain[:] = 1
    x = np.zeros((1, 1, 5, 5), np.float32)
    x[0, 0, 2, 2] = 1
    y = sn(x)[0, 0]
    expected = np.zeros((5, 5))
    expected[2, 2] = -4
    expected[1, 2] = expected[3, 2] = expected[2, 1] = expected[2, 3] = 1
    np.testing.assert_array_equal(y, expected)


@given(value=st.floats(-100, 100), gain=st.floats(-3, 3))
def test_sn_constant_interior_zero(value, gain):
    sn = SNBranch(2)
    sn.gain[:] = gain
    y = sn(np.full((1, 2, 6, 6), value, np.float32))
    assert np.abs(y[:, :, 1:-1, 1:-1]).max() <= 1e-5 * max(1.0, abs(value * gain))


@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5))
def test_sn_affine_interior_zero(a, b, c):
    i, j = np.mgrid[0:7, 0:8]
    img = (a * i + b * j + c).astype(np.float32)[None, None]
    sn = SNBranch(1)
    sn.gain[:] = 1
    assert np.abs(sn(img)[0, 0, 1:-1, 1:-1]).max() < 1e-4


def test_sn_ramp_direct_stencil():
    i, j = np.mgrid[0:6, 0:6]
    img = (i + 2 * j).astype(np.float64)
    direct = np.zeros((4, 4))
    for r in range(1, 5):
        for s in range(1, 5):
            direct[r - 1, s - 1] = img[r - 1, s] + img[r + 1, s] + img[r, s - 1] + img[r, s + 1] - 4 * img[r, s]
    assert not direct.any()
    sn = SNBranch(1, dtype=np.float64)
    sn.gain[:] = 1
    np.testing.assert_array_equal(sn(img[None, None])[0, 0, 1:-1, 1:-1], direct)


def test_sn_rejects_gain_mismatch():
    with pytest.raises(ShapeError):
        SNBranch(3)(np.zeros((1, 2, 4, 4), np.float32))


def test_sn_grads(rng):
    sn = randomize(SNBranch(3, dtype=np.float64), rng)
    x = rng.standard_normal((2, 3, 5, 5))
    r = rng.standard_normal(x.shape)
    _, cache = sn.forward(x)
    grads = {}
    dx = sn.backward(cache, r, grads)
    check_grads(lambda: float((sn(x) * r).sum()), [(x, dx), (sn.gain, grads["blk.gain"])], rng)


# -- SPPF -------------------------------------------------------------------

def test_sppf_shape_and_concat_width():
    s = SPPF(64)
    assert s(np.zeros((1, 64, 8, 8), np.float32)).shape == (1, 64, 8, 8)
    assert s.pw_out.spec.in_channels == 4 * 32


def test_sppf_odd_channels_rejected():
    with pytest.raises(ShapeError, match="even"):
        SPPF(5)


def test_sppf_zero_weights_give_zero(rng):
    s = zero(SPPF(8))
    assert not s(rng.standard_normal((1, 8, 6, 6)).astype(np.float32)).any()


def test_sppf_constant_input_composition(rng):
    s = randomize(SPPF(8), rng)
    x = np.full((1, 8, 6, 6), 0.7, np.float32)
    h = conv(s.pw_in, x)
    expected = conv(s.pw_out, np.concatenate([h, h, h, h], axis=1))
    assert np.abs(s(x) - expected).max() < 1e-6


def test_sppf_random_composition(rng):
    s = randomize(SPPF(8), rng)
    x = rng.standard_normal((2, 8, 9, 7)).astype(np.float32)
    h = conv(s.pw_in, x)
    p1 = T.maxpool2d(h)
    p2 = T.maxpool2d(p1)
    expected = conv(s.pw_out, np.concatenate([h, p1, p2, T.maxpool2d(p2)], axis=1))
    assert np.abs(s(x) - expected).max() < 1e-6


def test_sppf_grads(rng):
    s = randomize(SPPF(4, dtype=np.float64), rng)
    x = rng.standard_normal((1, 4, 8, 8))
    r = rng.standard_normal(x.shape)
    _, cache = s.forward(x)
    grads = {}
    dx = s.backward(cache, r, grads)
    check_grads(lambda: float((s(x) * r).sum()), [(x, dx)] + [(p, grads[n]) for n, p in s.named_parameters()],
                rng)


# -- MLIA -------------------------------------------------------------------

CHANNELS = [4, 8, 16, 32]


def stages_for(rng, n=1, base=64, dtype=np.float32):
    return [rng.standard_normal((n, c, base >> i, base >> i)).astype(dtype) for i, c in enumerate(CHANNELS)]


def test_mlia_shape(rng):
    m = randomize(MLIA(CHANNELS, 12), rng)
    assert m(stages_for(rng, 2), (16, 16)).shape == (2, 12, 16, 16)
    assert len(m.proj) == 4


def test_mlia_zero_features_zero_output():
    m = MLIA(CHANNELS, 6)
    m.assign_names("blk")
    m.attn.weight[:] = 1.0
    stages = [np.zeros((1, c, 8, 8), np.float32) for c in CHANNELS]
    y, cache = m.forward(stages, (4, 4))
    assert not y.any()
    gate = cache[-1]
    np.testing.assert_allclose(gate, 0.5)


def test_mlia_stage_count_mismatch():
    with pytest.raises(ShapeError, match="stages"):
        MLIA(CHANNELS, 6)([np.zeros((1, 4, 8, 8), np.float32)], (4, 4))


def test_mlia_matches_pool_then_transform_composition(rng):
    m = randomize(MLIA(CHANNELS, 6), rng)
    stages = stages_for(rng, 2, base=32)
    proj = [conv(p, T.bilinear_resize(x, 8, 8)) for p, x in zip(m.proj, stages)]
    z = conv(m.reduce, np.concatenate(proj, axis=1))
    pooled = z.mean(axis=(2, 3), keepdims=True)
    gate = T.sigmoid(conv(m.attn, pooled))
    assert np.abs(m(stages, (8, 8)) - z * gate).max() < 1e-5


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31), zero_stage=st.integers(0, 3))
def test_mlia_gate_open_interval_and_finite(seed, zero_stage):
    rng = np.random.default_rng(seed)
    m = randomize(MLIA(CHANNELS, 6), rng, scale=2.0)
    stages = stages_for(rng, base=16)
    stages[zero_stage] *= 0
    y, cache = m.forward(stages, (4, 4))
    gate = cache[-1]
    assert np.all(np.isfinite(y)) and np.all((gate >= 0) & (gate <= 1))
    # strictly inside (0,1) whenever float32 can represent the gap to the bound
    pre = cache[-2]
    moderate = np.abs(pre) < 15
    assert np.all((gate[moderate] > 0) & (gate[moderate] < 1))


def test_mlia_grads(rng):
    m = randomize(MLIA([4, 4, 8, 8], 4, dtype=np.float64), rng)
    stages = [rng.standard_normal((1, c, s, s)) for c, s in zip([4, 4, 8, 8], [8, 4, 2, 1])]
    r = rng.standard_normal((1, 4, 4, 4))
    _, cache = m.forward(stages, (4, 4))
    grads = {}
    dstages = m.backward(cache, r, grads)
    pairs = list(zip(stages, dstages)) + [(p, grads[n]) for n, p in m.named_parameters()]
    check_grads(lambda: float((m(stages, (4, 4)) * r).sum()), pairs, rng)


# -- X-Fuse -----------------------------------------------------------------

def test_xfuse_shape():
    f = XFuse(32)
    up = np.zeros((1, 32, 64, 64), np.float32)
    assert f(up, up, np.zeros((1, 3, 256, 256), np.float32)).shape == (1, 32, 64, 64)
    assert f.pw_out.spec.in_channels == 32 + 3


def test_xfuse_zero_weights_zero_output(rng):
    f = zero(XFuse(8))
    up = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    assert not f(up, up, rng.standard_normal((1, 3, 16, 16)).astype(np.float32)).any()


def test_xfuse_spatial_mismatch():
    f = XFuse(4)
    with pytest.raises(ShapeError, match="must match"):
        f(np.zeros((1, 4, 8, 8), np.float32), np.zeros((1, 4, 8, 4), np.float32), np.zeros((1, 3, 8, 8), np.float32))


def test_xfuse_composition(rng):
    f = randomize(XFuse(8), rng)
    up = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    skip = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    blur = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    a = conv(f.group_conv, np.concatenate([up, skip], axis=1))
    feat = conv(f.pw_mix, T.gelu(a))
    expected = conv(f.pw_out, np.concatenate([feat, T.bilinear_resize(blur, 8, 8)], axis=1))
    assert np.abs(f(up, skip, blur) - expected).max() < 1e-5


def test_xfuse_grads(rng):
    f = randomize(XFuse(4, dtype=np.float64), rng)
    up = rng.standard_normal((1, 4, 8, 8))
    skip = rng.standard_normal((1, 4, 8, 8))
    blur = rng.uniform(0, 1, (1, 3, 16, 16))
    r = rng.standard_normal((1, 4, 8, 8))
    _, cache = f.forward(up, skip, blur)
    grads = {}
    dup, dskip, dblur = f.backward(cache, r, grads)
    pairs = [(up, dup), (skip, dskip), (blur, dblur)] + [(p, grads[n]) for n, p in f.named_parameters()]
    check_grads(lambda: float((f(up, skip, blur) * r).sum()), pairs, rng)


def test_block_macs_match_hand_counts():
    ld = LDBlock(4)
    # dw 9*16*4 + expand 16*16 + compress 16*16 + 3 elementwise*64 + sn 9*64 + 2*64
    assert ld.macs(4, 4) == 576 + 1024 + 1024 + 192 + 576 + 128
    assert SPPF(4).macs(2, 2) == 4 * 2 * 4 + 4 * 8 * 4 + 3 * 4 * 2
