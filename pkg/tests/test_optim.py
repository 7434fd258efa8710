import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mambalm.config import OptimizerConfig, ScheduleConfig
from mambalm.optim import AdamW, adamw_step, batch_size_at, lr_at, noise_temperature, schedule_trace

FULL = ScheduleConfig.full_scale()
FULL_BS = ScheduleConfig.full_scale(batch_scaling=True)


def test_noise_temperature():
    assert noise_temperature(6.4e-4, 2048) == pytest.approx(6.4e-4 / 45.254834, rel=1e-7)
    assert noise_temperature(6.4e-4, 2048) == pytest.approx(1.41421e-5, rel=1e-5)
    assert noise_temperature(0.0, 77) == 0.0
    assert noise_temperature(0.3, 1) == 0.3
    with pytest.raises(ValueError):
        noise_temperature(1.0, 0)


def test_batch_rampup_values():
    assert batch_size_at(0, FULL) == 128
    assert batch_size_at(25e9, FULL) == 1088
    assert batch_size_at(50e9, FULL) == 2048
    assert batch_size_at(1e12, FULL) == 2048


def test_batch_granularity():
    cfg = dataclasses.replace(FULL, batch_granularity=64)
    assert batch_size_at(25e9, cfg) == 1088
    assert batch_size_at(26e9, cfg) % 64 == 0


@given(st.floats(0, 6e12), st.floats(0, 6e12))
def test_batch_nondecreasing(a, b):
    lo, hi = sorted((a, b))
    assert batch_size_at(lo, FULL) <= batch_size_at(hi, FULL)


def test_lr_full_scale_values():
    assert lr_at(2e12, FULL) == pytest.approx(6.4e-4, rel=1e-12)
    assert lr_at(FULL.t_total, FULL) == pytest.approx(2.5e-6, rel=1e-12)
    mid = FULL.stable_end + FULL.t_decay / 2
    assert lr_at(mid, FULL) == pytest.approx(4.0e-5, rel=1e-12)
    assert lr_at(0, FULL) == 0.0
    assert lr_at(FULL.t_warmup / 2, FULL) == pytest.approx(3.2e-4, rel=1e-12)


def test_lr_out_of_range():
    with pytest.raises(ValueError):
        lr_at(FULL.t_total * 1.01, FULL)
    with pytest.raises(ValueError):
        lr_at(-1, FULL)


def test_batch_scaled_lr_keeps_temperature():
    # 128 sequences just past warmup, inside rampup
    cfg = dataclasses.replace(FULL_BS, t_warmup=1.0)
    assert batch_size_at(1.0, cfg) == 128
    assert lr_at(1.0, cfg) == pytest.approx(1.6e-4, rel=1e-12)
    assert noise_temperature(lr_at(1.0, cfg), 128) == pytest.approx(6.4e-4 / math.sqrt(2048), rel=1e-12)


@given(st.floats(0, 1))
def test_lr_continuous_at_boundaries(frac):
    for cfg in (FULL, FULL_BS):
        for edge in (cfg.t_warmup, cfg.stable_end):
            assert lr_at(edge - 1e-3, cfg) == pytest.approx(lr_at(edge, cfg), rel=1e-9)
            assert lr_at(edge + 1e-3, cfg) == pytest.approx(lr_at(edge, cfg), rel=1e-9)


def test_decay_ratio_exact():
    for cfg in (FULL, FULL_BS):
        assert lr_at(cfg.t_total, cfg) / lr_at(cfg.stable_end, cfg) == pytest.approx(1 / 256, rel=1e-12)


@given(st.floats(1e9, 5.22e12))
def test_temperature_constant_after_warmup(t):
    T = noise_temperature(lr_at(t, FULL_BS), batch_size_at(t, FULL_BS))
    assert T == pytest.approx(6.4e-4 / math.sqrt(2048), rel=1e-12)


def test_trace_contains_endpoints():
    tr = schedule_trace(FULL, 50)
    assert tr[0].t == 0 and tr[-1].t == FULL.t_total
    assert tr[-1].lr == pytest.approx(2.5e-6, rel=1e-12)
    assert all(a.t < b.t for a, b in zip(tr, tr[1:]))


# ---------------------------------------------------------------- AdamW

CFG = OptimizerConfig()


def test_adamw_pure_decay():
    p = np.array([1.0, -2.0])
    z = np.zeros(2)
    p2, _, _ = adamw_step(p, z, z, z, 1, 0.01, CFG)
    np.testing.assert_allclose(p2 - p, -0.01 * 0.1 * p, rtol=1e-15)


def test_adamw_first_step_hand_value():
    p2, m, v = adamw_step(np.array(0.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 0.01, CFG)
    assert m == pytest.approx(0.1) and v == pytest.approx(0.05)
    assert float(p2) == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-14)


def test_adamw_saturates_to_lr():
    cfg = dataclasses.replace(CFG, weight_decay=0.0)
    p, m, v = np.array(0.0), np.array(0.0), np.array(0.0)
    for k in range(1, 500):
        prev = float(p)
        p, m, v = adamw_step(p, np.array(0.37), m, v, k, 1e-3, cfg)
    assert prev - float(p) == pytest.approx(1e-3, rel=1e-6)


def test_adamw_zero_lr_is_identity():
    rng = np.random.default_rng(0)
    params = {"w": rng.standard_normal((3, 3)), "layers.0.norm": rng.standard_normal(3)}
    before = {k: v.copy() for k, v in params.items()}
    opt = AdamW(params)
    opt.step(params, {k: rng.standard_normal(v.shape) for k, v in params.items()}, 0.0)
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])


def test_adamw_decay_exemptions():
    params = {"head": np.ones(2), "layers.0.B_norm": np.ones(2), "layers.0.D": np.ones(2),
              "layers.0.A_log": np.ones(2), "layers.0.dt_bias": np.ones(2), "layers.0.conv_bias": np.ones(2)}
    opt = AdamW(params)
    opt.step(params, {k: np.zeros(2) for k in params}, 0.5)
    assert params["head"][0] == pytest.approx(1 - 0.05)
    for k in params:
        if k != "head":
            np.testing.assert_array_equal(params[k], 1.0)


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 0.1, CFG)
