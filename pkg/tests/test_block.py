import numpy as np
import pytest

from fuxi_linear.block import FuXiBlock
from fuxi_linear.config import ModelConfig
from fuxi_linear.tensor import Parameter, check_gradient, rms_norm, silu


def perturbed_block(cfg, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    blk = FuXiBlock(cfg, rng)
    for p in blk.parameters():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return blk


def times(rng, n, max_gap=20):
    ts = 1_650_000_000 + np.cumsum(rng.integers(0, max_gap, n))
    return ts, np.append(ts[1:], ts[-1] + 3)


def test_zero_gate_annihilates(micro_cfg):
    blk = perturbed_block(micro_cfg)
    ts = np.arange(5)
    out = blk.lmca_forward(np.zeros((5, 16)), ts, ts).data
    assert np.array_equal(out, np.zeros((5, 48)))


def test_unit_gate_is_plain_concat(micro_cfg, rng):
    blk = perturbed_block(micro_cfg)
    X = np.ones((4, 16)) + 0.0
    blk.W_u.data = np.full((16, 48), 1.0 / 16)       # ones @ W_u == 1
    ts, tn = times(rng, 4)
    out = blk.lmca_forward(X, ts, tn).data
    parts = [rms_norm(blk.retention.forward(X), blk.norm_ret).data,
             rms_norm(blk.positional.forward(X), blk.norm_pos).data,
             rms_norm(blk.temporal.forward(X, ts, tn), blk.norm_time).data]
    assert np.allclose(out, np.concatenate(parts, axis=-1), atol=1e-13)


def test_zero_channel_path(micro_cfg, rng):
    blk = perturbed_block(micro_cfg)
    X0 = rng.standard_normal((5, 16))
    out = blk.mffn_forward(np.zeros((5, 48)), X0).data
    Y = rms_norm(X0, blk.norm_mid).data
    ref = ((Y @ blk.W_1.data) * silu(Y @ blk.W_2.data).data) @ blk.W_3.data
    assert np.allclose(out, ref, atol=1e-13)


def test_w2_zero_kills_output(micro_cfg, rng):
    blk = perturbed_block(micro_cfg)
    blk.W_2.data = np.zeros_like(blk.W_2.data)
    ts, tn = times(rng, 6)
    assert np.array_equal(blk.forward(rng.standard_normal((6, 16)), ts, tn).data,
                          np.zeros((6, 16)))


def test_zero_input_fresh_block(micro_cfg):
    for seed in range(3):
        blk = FuXiBlock(micro_cfg, np.random.default_rng(seed))
        ts = np.arange(7) * 3
        assert np.array_equal(blk.forward(np.zeros((7, 16)), ts, ts + 1).data, np.zeros((7, 16)))


def test_mffn_gradients(micro_cfg, rng):
    cfg = micro_cfg.replace(d=8, d_ffn=8, H_t=1, H=1)
    blk = perturbed_block(cfg)
    O = Parameter(rng.standard_normal((3, 24)), dtype=np.float64)
    X0 = Parameter(rng.standard_normal((3, 8)), dtype=np.float64)
    params = [blk.W_0, blk.W_1, blk.W_2, blk.W_3, blk.norm_mid, O, X0]
    assert check_gradient(lambda: blk.mffn_forward(O, X0).sum(), params) < 1e-4


def test_forms_agree_n64(micro_cfg, rng):
    cfg = micro_cfg.replace(n=64)
    blk = perturbed_block(cfg)
    X = rng.standard_normal((2, 64, 16))
    ts, tn = times(rng, 64)
    par = blk.forward(X, ts, tn, "parallel").data
    chk = blk.forward(X, ts, tn, "chunkwise", chunk=16).data
    assert np.abs(par - chk).max() < 1e-9
    state = blk.init_state((2,))
    for i in range(64):
        state, y = blk.step(state, X[:, i], ts[i], tn[i])
        assert np.abs(y.data - par[:, i]).max() < 1e-9


def test_fresh_state_equals_length_one(micro_cfg, rng):
    blk = perturbed_block(micro_cfg)
    x = rng.standard_normal((1, 16))
    ref = blk.forward(x, [77], [80]).data[0]
    _, y = blk.step(blk.init_state(), x[0], 77, 80)
    assert np.abs(y.data - ref).max() < 1e-12


def test_prefill_state_continues(micro_cfg, rng):
    blk = perturbed_block(micro_cfg)
    X = rng.standard_normal((10, 16))
    ts, tn = times(rng, 10)
    _, st_forward = blk.forward(X, ts, tn, "chunkwise", 4, return_state=True)
    st = blk.init_state()
    for i in range(10):
        st, _ = blk.step(st, X[i], ts[i], tn[i])
    for a, b in ((st_forward.retention.kv, st.retention.kv),
                 (st_forward.positional.kv, st.positional.kv),
                 (st_forward.temporal.kv, st.temporal.kv)):
        assert np.abs(a.S.data - b.S.data).max() < 1e-10


@pytest.mark.parametrize("use_temporal", [True, False])
def test_gap_sensitivity_follows_switch(micro_cfg, rng, use_temporal):
    blk = perturbed_block(micro_cfg.replace(use_temporal=use_temporal))
    x = rng.standard_normal(16)
    st, _ = blk.step(blk.init_state(), x, 100, 100)
    _, y1 = blk.step(st, x, 103, 103)
    _, y2 = blk.step(st, x, 117, 117)
    assert np.array_equal(y1.data, y2.data) != use_temporal


def test_causality(micro_cfg, rng):
    blk = perturbed_block(micro_cfg)
    X = rng.standard_normal((12, 16))
    ts, tn = times(rng, 12)
    base = blk.lmca_forward(X, ts, tn).data
    X2 = X.copy()
    X2[8:] = rng.standard_normal((4, 16))
    out = blk.lmca_forward(X2, ts, tn).data
    assert np.allclose(out[:8], base[:8], atol=1e-14)


def test_disabled_channels_zero_filled(micro_cfg, rng):
    cfg = micro_cfg.replace(use_retention=False, use_positional=False, use_temporal=False)
    blk = perturbed_block(cfg)
    X = rng.standard_normal((5, 16))
    ts, tn = times(rng, 5)
    assert np.array_equal(blk.lmca_forward(X, ts, tn).data, np.zeros((5, 48)))
    assert blk.W_u.shape == (16, 48) and blk.W_0.shape == (48, 16)
    ref = blk.mffn_forward(np.zeros((5, 48)), X).data
    assert np.array_equal(blk.forward(X, ts, tn).data, ref)


def test_fan_in_init_scale():
    cfg = ModelConfig(d=64, d_ffn=256)
    blk = FuXiBlock(cfg, np.random.default_rng(0))
    assert abs(blk.W_3.data.std() * np.sqrt(256) - 0.88) < 0.05
    assert np.abs(blk.W_1.data).max() <= 2 / np.sqrt(64)
