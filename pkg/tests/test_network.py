import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_rel_error, numeric_grad
from rtfocuser import tensor as T
from rtfocuser.blocks import Conv2d
from rtfocuser.network import (PAPER_MACS, PAPER_PARAMS, CalibrationError, ConfigError, NetworkConfig, build,
                               calibrate, count_macs, count_macs_config, count_params, count_params_config,
                               forward, infer)
from rtfocuser.tensor import ConvSpec, ShapeError
from rtfocuser.training import mse_loss

TINY = NetworkConfig(base_width=4, encoder_depths=(1, 1, 1, 1))
SMALL = NetworkConfig(base_width=8, encoder_depths=(1, 1, 1, 1))


def randomize_head(model, rng, scale=0.01):
    model.head.weight[...] = rng.standard_normal(model.head.weight.shape) * scale


# -- config -----------------------------------------------------------------

def test_default_config_widths():
    c = NetworkConfig()
    assert c.stage_widths == tuple(c.base_width * k for k in (1, 2, 4, 8))
    assert c.fused_dim == 4 * c.base_width


@pytest.mark.parametrize("kw,msg", [
    ({"base_width": 0}, "base_width"),
    ({"encoder_depths": (1, 0, 1, 1)}, "encoder_depths"),
    ({"encoder_depths": (1, 1, 1)}, "encoder_depths"),
    ({"base_width": 6}, "divisible"),
])
def test_invalid_config_names_constraint(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        build(NetworkConfig(**kw))


def test_config_text_round_trip():
    c = NetworkConfig(base_width=12, encoder_depths=(2, 1, 3, 1), sn_enabled=False)
    assert NetworkConfig.loads(c.dumps()) == c


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError):
        NetworkConfig.loads("base_width=8\nwidth_multiplier=2\n")


# -- build ------------------------------------------------------------------

def test_build_is_deterministic():
    a, b = build(SMALL, seed=3), build(SMALL, seed=3)
    pa, pb = a.parameters(), b.parameters()
    assert list(pa) == list(pb)
    for k in pa:
        np.testing.assert_array_equal(pa[k], pb[k])
    c = build(SMALL, seed=4)
    assert any(not np.array_equal(pa[k], c.parameters()[k]) for k in pa)


def test_parameter_names_unique_and_complete():
    m = build(TINY)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    for prefix in ("stem.", "enc0.0.", "down0.", "sppf.", "mlia.", "dec0.up.", "dec0.skip.", "dec0.fuse.", "head."):
        assert any(n.startswith(prefix) for n in names), prefix


def test_init_conventions():
    m = build(SMALL, seed=0)
    assert not m.head.weight.any() and not m.head.bias.any()
    for layer in m.conv_layers():
        if layer.bias is not None:
            assert not layer.bias.any()
    for name, p in m.named_parameters():
        if name.endswith(".gamma"):
            assert np.all(p == 1)
        if name.endswith(".beta"):
            assert not p.any()
        if name.endswith("sn.gain"):
            assert np.allclose(p, 0.1)
    stem = m.stem.weight
    assert abs(stem.std() - 1 / np.sqrt(27)) < 0.05


def test_smoke_forward_64():
    m = build(SMALL)
    x = np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)).astype(np.float32)
    y = forward(m, x)
    assert y.shape == x.shape and y.dtype == np.float32


def test_fresh_model_is_identity():
    m = build(SMALL)
    x = np.random.default_rng(1).uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward(m, x), x)


def test_fresh_model_clamps_out_of_range():
    m = build(TINY)
    x = np.linspace(-0.5, 1.5, 3 * 16 * 16, dtype=np.float32).reshape(1, 3, 16, 16)
    np.testing.assert_array_equal(forward(m, x), np.clip(x, 0, 1))


@pytest.mark.parametrize("shape", [(1, 3, 20, 16), (1, 4, 16, 16), (3, 16, 16)])
def test_forward_rejects_bad_input(shape):
    with pytest.raises(ShapeError):
        forward(build(TINY), np.zeros(shape, np.float32))


def test_infer_handles_any_size():
    m = build(TINY)
    x = np.random.default_rng(2).uniform(0, 1, (1, 3, 21, 13)).astype(np.float32)
    np.testing.assert_array_equal(infer(m, x), x)


def test_eval_forward_deterministic():
    rng = np.random.default_rng(3)
    m = build(SMALL, seed=1)
    randomize_head(m, rng)
    m.eval()
    x = rng.uniform(0, 1, (1, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward(m, x), forward(m, x))


@settings(max_examples=10)
@given(seed=st.integers(0, 2**31))
def test_output_always_in_unit_range(seed):
    rng = np.random.default_rng(seed)
    m = build(TINY, seed=seed % 1000)
    randomize_head(m, rng, scale=1.0)
    x = rng.uniform(-1, 2, (1, 3, 16, 16)).astype(np.float32)
    y = forward(m, x)
    assert y.min() >= 0 and y.max() <= 1


# -- composition oracle -----------------------------------------------------

def _conv(layer, x):
    return T.conv2d(x, layer.weight, layer.bias, layer.spec)


def _ld(blk, x):
    bn = blk.bn.state
    t = _conv(blk.pw_compress, _conv(blk.pw_expand, T.batchnorm2d(T.gelu(_conv(blk.dw, x)), bn)))
    lap = T.conv2d(x, blk.sn.kernel, None, blk.sn.spec)
    return x + t + lap * blk.sn.gain[None, :, None, None]


def test_tiny_forward_matches_hand_chain():
    rng = np.random.default_rng(7)
    m = build(TINY, seed=11)
    randomize_head(m, rng, scale=0.1)
    m.eval()
    for _, p in m.named_parameters():
        p += rng.standard_normal(p.shape).astype(np.float32) * 0.05
    x = rng.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32)

    h = _conv(m.stem, x)
    feats = []
    for i, size in enumerate((16, 8, 4, 2)):
        if i:
            h = _conv(m.downs[i - 1], T.bilinear_resize(h, size, size))
        h = _ld(m.stages[i][0], h)
        feats.append(h)
    sp = m.sppf
    a = _conv(sp.pw_in, h)
    p1 = T.maxpool2d(a)
    p2 = T.maxpool2d(p1)
    h = _conv(sp.pw_out, np.concatenate([a, p1, p2, T.maxpool2d(p2)], axis=1))
    feats[-1] = h
    ml = m.mlia
    z = _conv(ml.reduce, np.concatenate([_conv(p, T.bilinear_resize(f, 4, 4)) for p, f in zip(ml.proj, feats)], 1))
    msf = z * T.sigmoid(_conv(ml.attn, z.mean(axis=(2, 3), keepdims=True)))
    d = h
    for s, size in ((2, 4), (1, 8), (0, 16)):
        up = _conv(m.ups[s], T.bilinear_resize(d, size, size))
        skip = _conv(m.skips[s], T.bilinear_resize(msf, size, size))
        fu = m.fuse[s]
        f = _conv(fu.pw_mix, T.gelu(_conv(fu.group_conv, np.concatenate([up, skip], 1))))
        d = _conv(fu.pw_out, np.concatenate([f, T.bilinear_resize(x, size, size)], 1))
    expected = np.clip(x + _conv(m.head, d), 0, 1)
    assert np.abs(forward(m, x) - expected).max() < 1e-5


# -- counters ---------------------------------------------------------------

def test_single_conv_counts():
    c = Conv2d(ConvSpec.pointwise(3, 8))
    assert c.params_count() == 3 * 8 + 8 == 32
    assert c.spec.macs(4, 4) == 384
    assert ConvSpec(3, 8, 3, 3, 1, 1).macs(4, 4) == 3456


def test_param_counters_agree():
    for cfg in (TINY, SMALL, NetworkConfig(), NetworkConfig(base_width=8, sn_enabled=False, sppf_enabled=False)):
        assert count_params(build(cfg)) == count_params_config(cfg)


def test_hand_audit_tiny_params():
    # W=4 widths 4/8/16/32, fused 16; conv(cin,cout,k,g) = cout*cin/g*k*k + cout
    stem, head = 4 * 3 * 9 + 4, 3 * 4 * 9 + 3
    ld = sum(8 * d * d + 18 * d for d in (4, 8, 16, 32))  # dw 10d, bn 2d, expand 4d^2+4d, compress 4d^2+d, sn d
    downs = (8 * 4 + 8) + (16 * 8 + 16) + (32 * 16 + 32)
    sppf = (16 * 32 + 16) + (32 * 64 + 32)
    mlia = sum(16 * c + 16 for c in (4, 8, 16, 32)) + (16 * 64 + 16) + (16 * 16 + 16)
    dec = 0
    for d, below in ((4, 8), (8, 16), (16, 32)):
        dec += (d * below + d) + (d * 16 + d) + (d * (2 * d // 4) * 9 + d) + (d * d + d) + (d * (d + 3) + d)
    total = stem + head + ld + downs + sppf + mlia + dec
    assert total == 21383
    assert count_params(build(TINY)) == total


def test_hand_audit_tiny_macs():
    # W=4 on 16x16: stage areas 256/64/16/4, MLIA and stage 3 at 4x4
    stem = 256 * 4 * 3 * 9
    stages = sum(a * d * (8 * d + 23) for a, d in ((256, 4), (64, 8), (16, 16), (4, 32)))
    downs = sum(a * cin + a * cin * 2 * cin for a, cin in ((64, 4), (16, 8), (4, 16)))
    sppf = 4 * 16 * 32 + 4 * 32 * 64 + 3 * 4 * 16
    mlia = (16 * 4 + 16 * 8 + 16 * 32) + 16 * 16 * 60 + 16 * 16 * 64 + 16 * 16 * 16 + 2 * 16 * 16
    dec = 0
    for a, d, skip_resize, blur_resize in ((256, 4, True, False), (64, 8, True, True), (16, 16, False, True)):
        dec += a * 2 * d + a * d * 2 * d                    # upsample, 1x1 halving
        dec += (a * 16 if skip_resize else 0) + a * d * 16  # MLIA skip resize, 1x1
        dec += a * d * (2 * d // 4) * 9 + a * d * d + a * d * (d + 3) + a * d  # group, mix, out, gelu
        dec += 3 * a if blur_resize else 0
    head = 256 * 3 * 4 * 9 + 3 * 256
    total = stem + stages + downs + sppf + mlia + dec + head
    assert total == 434608
    assert count_macs(build(TINY), 16, 16) == total


def test_default_config_within_budget():
    cfg = NetworkConfig()
    p, m = count_params_config(cfg), count_macs_config(cfg, 256, 256)
    assert abs(p - PAPER_PARAMS) / PAPER_PARAMS <= 0.15
    assert abs(m - PAPER_MACS) / PAPER_MACS <= 0.15


@pytest.mark.parametrize("cfg", [NetworkConfig(), TINY, NetworkConfig(base_width=8, sppf_enabled=False)])
def test_macs_scale_by_four(cfg):
    for h, w in ((256, 256), (64, 128), (16, 24)):
        assert count_macs_config(cfg, 2 * h, 2 * w) == 4 * count_macs_config(cfg, h, w)


def test_macs_reject_indivisible():
    with pytest.raises(ShapeError):
        count_macs_config(TINY, 20, 16)


def test_calibrate_hits_budget_and_matches_default():
    cfg = calibrate()
    assert abs(count_params_config(cfg) - PAPER_PARAMS) / PAPER_PARAMS <= 0.15
    assert abs(count_macs_config(cfg, 256, 256) - PAPER_MACS) / PAPER_MACS <= 0.15
    assert cfg == NetworkConfig()
    assert calibrate() == cfg


def test_calibrate_loose_tolerance_returns_smallest():
    cfg = calibrate(tolerance=1.0)
    assert cfg.base_width == 24 and cfg.encoder_depths == (3, 3, 6, 3)


def test_calibrate_impossible_reports_nearest():
    with pytest.raises(CalibrationError, match="nearest") as info:
        calibrate(target_params=1e3, target_macs=1e6)
    assert len(info.value.nearest) == 3


# -- gradients --------------------------------------------------------------

@pytest.mark.parametrize("mode", ["train", "eval"])
def test_model_gradient_spot_checks(mode):
    rng = np.random.default_rng(5)
    m = build(TINY, seed=2, dtype=np.float64)
    randomize_head(m, rng, scale=0.05)
    m.set_mode(mode)
    x = rng.uniform(0.3, 0.7, (2, 3, 16, 16))
    target = rng.uniform(0, 1, x.shape)

    def loss():
        return mse_loss(m.forward(x, keep_cache=False)[0], target)[0]

    y, cache = m.forward(x)
    grads = m.backward(cache, mse_loss(y, target)[1])
    assert set(grads) == set(m.parameters())
    for name, p in m.named_parameters():
        idx = rng.choice(p.size, size=min(3, p.size), replace=False)
        num = numeric_grad(loss, p, step=1e-3, idx=idx)
        err = max_rel_error(grads[name], num, floor=1e-6)
        assert err < 1e-3, name
