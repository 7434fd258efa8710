import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_params
from mambalm import kernels as K
from mambalm.config import ModelConfig
from mambalm.inference import (DecodeState, MemoryBudgetExceeded, PaddedBatch, TransientTracker, decode_step,
                               generate, prefill_parallel, prefill_sequential, sample, state_nbytes)
from mambalm.model import init_params, layer_params, model_forward

CFG = ModelConfig(n_layers=2, d_model=16, dt_rank=2, d_state=4, vocab_size=32)
PARAMS = random_params(CFG, 0)


def _prompt(seed, T, vocab=32):
    return np.random.default_rng(seed).integers(1, vocab, size=T)


def _assert_states_close(s1, s2, tol):
    for a, b in zip(s1.conv + s1.ssm, s2.conv + s2.ssm):
        np.testing.assert_allclose(a, b, rtol=0, atol=tol)
    np.testing.assert_array_equal(s1.alive, s2.alive)
    np.testing.assert_array_equal(s1.position, s2.position)


def test_single_prompt_state_is_recurrence_fold():
    # First-layer state rebuilt from the raw step kernel.
    p = _prompt(1, 12)
    state, _ = prefill_parallel(PARAMS, PaddedBatch.from_prompts([p]), config=CFG)
    lp = layer_params(PARAMS, 0)
    eps, di, R, N = CFG.rmsnorm_eps, CFG.d_inner, CFG.dt_rank, CFG.d_state
    x = PARAMS["embedding"][p]
    a = (K.rmsnorm(x, lp["norm"], eps) @ lp["in_proj"])[:, :di]
    c, _ = K.causal_conv1d(a, lp["conv_weight"], lp["conv_bias"])
    v = K.silu(c)
    pr = v @ lp["x_proj"]
    dn = K.rmsnorm(pr[:, :R], lp["dt_norm"], eps)
    Bn = K.rmsnorm(pr[:, R:R + N], lp["B_norm"], eps)
    Cn = K.rmsnorm(pr[:, R + N:], lp["C_norm"], eps)
    delta = K.softplus(dn @ lp["dt_proj"] + lp["dt_bias"])
    A = -np.exp(lp["A_log"])
    h = np.zeros((di, N))
    for t in range(len(p)):
        _, h = K.selective_scan_step(A, lp["D"], h, v[t], delta[t], Bn[t], Cn[t])
    np.testing.assert_allclose(state.ssm[0][0], h, rtol=0, atol=1e-8)
    np.testing.assert_allclose(state.conv[0][0], a[-3:].T, rtol=0, atol=1e-12)


def test_padded_row_matches_unpadded():
    abc, bc = [5, 6, 7], [6, 7]
    state, logits = prefill_parallel(PARAMS, PaddedBatch.from_prompts([abc, bc]), config=CFG)
    solo, solo_logits = prefill_parallel(PARAMS, PaddedBatch.from_prompts([bc]), config=CFG)
    for a, b in zip(state.conv + state.ssm, solo.conv + solo.ssm):
        np.testing.assert_allclose(a[1], b[0], rtol=0, atol=1e-8)
    np.testing.assert_allclose(logits[1], solo_logits[0], rtol=0, atol=1e-8)
    assert state.position.tolist() == [3, 2]


def test_all_padding_row_is_dead_and_zero():
    batch = PaddedBatch(np.array([[1, 2, 3], [0, 0, 0]]), np.array([[1, 1, 1], [0, 0, 0]], bool))
    for state, logits in (prefill_parallel(PARAMS, batch, config=CFG),
                          prefill_sequential(PARAMS, batch, 2, config=CFG)):
        assert state.alive.tolist() == [True, False]
        assert all(np.all(a[1] == 0) for a in state.conv + state.ssm)
        assert np.all(logits[1] == 0)


def test_rejects_right_padding():
    with pytest.raises(ValueError, match="left-padded"):
        PaddedBatch(np.array([[1, 2, 0]]), np.array([[1, 1, 0]], bool))


def test_sequential_chunk_1_matches_parallel():
    batch = PaddedBatch.from_prompts([_prompt(2, 32)])
    s_par, l_par = prefill_parallel(PARAMS, batch, config=CFG)
    s_seq, l_seq = prefill_sequential(PARAMS, batch, 1, config=CFG)
    _assert_states_close(s_par, s_seq, 1e-8)
    np.testing.assert_allclose(l_par, l_seq, rtol=0, atol=1e-8)


def test_chunk_sizes_agree():
    batch = PaddedBatch.from_prompts([_prompt(3, 29), _prompt(4, 17)])
    s8, l8 = prefill_sequential(PARAMS, batch, 8, config=CFG)
    s3, l3 = prefill_sequential(PARAMS, batch, 3, config=CFG)
    _assert_states_close(s8, s3, 1e-10)
    np.testing.assert_allclose(l8, l3, rtol=0, atol=1e-10)


def test_sequential_peak_bytes_bounded_by_chunk():
    desk = ModelConfig()
    params = init_params(desk, 0)
    ref = TransientTracker()
    prefill_parallel(params, PaddedBatch.from_prompts([_prompt(5, 64, 256)]), config=desk, tracker=ref)
    long = TransientTracker()
    prefill_sequential(params, PaddedBatch.from_prompts([_prompt(6, 4096, 256)]), 64, config=desk, tracker=long)
    assert long.peak < 2 * ref.peak


def test_parallel_peak_grows_with_length():
    peaks = []
    for T in (16, 32, 64):
        tr = TransientTracker()
        prefill_parallel(PARAMS, PaddedBatch.from_prompts([_prompt(7, T)]), config=CFG, tracker=tr)
        peaks.append(tr.peak)
    assert peaks[2] - peaks[1] == 2 * (peaks[1] - peaks[0]) > 0


def test_budget_enforced():
    tr = TransientTracker()
    batch = PaddedBatch.from_prompts([_prompt(8, 16)])
    prefill_parallel(PARAMS, batch, config=CFG, tracker=tr)
    prefill_parallel(PARAMS, batch, config=CFG, tracker=TransientTracker(budget=tr.peak))
    with pytest.raises(MemoryBudgetExceeded):
        prefill_parallel(PARAMS, PaddedBatch.from_prompts([_prompt(8, 17)]), config=CFG,
                         tracker=TransientTracker(budget=tr.peak))


def test_decode_matches_parallel_forward():
    p = _prompt(9, 20)
    state, _ = prefill_parallel(PARAMS, PaddedBatch.from_prompts([p]), config=CFG)
    logits, _ = decode_step(PARAMS, state, [11], config=CFG)
    full, _ = model_forward(PARAMS, np.append(p, 11), config=CFG)
    np.testing.assert_allclose(logits[0], full[-1], rtol=0, atol=1e-8)


def test_step_fold_matches_prefill():
    p = _prompt(10, 15)
    state = DecodeState.zeros(CFG, 1)
    for tok in p:
        logits, state = decode_step(PARAMS, state, [tok], config=CFG)
    ref, ref_logits = prefill_parallel(PARAMS, PaddedBatch.from_prompts([p]), config=CFG)
    _assert_states_close(state, ref, 1e-8)
    np.testing.assert_allclose(logits, ref_logits, rtol=0, atol=1e-8)


def test_state_bytes_constant_over_10k_steps():
    state = DecodeState.zeros(CFG, 2)
    before = state.nbytes
    assert before == state_nbytes(CFG, 2)
    tok = np.array([1, 2])
    for _ in range(10_000):
        logits, state = decode_step(PARAMS, state, tok, config=CFG)
        assert state.nbytes == before
        tok = np.argmax(logits, axis=-1)


def test_dead_rows_frozen():
    state, _ = prefill_parallel(PARAMS, PaddedBatch.from_prompts([[1, 2], [3, 4]]), config=CFG)
    state.alive[1] = False
    frozen = state.copy()
    logits, state = decode_step(PARAMS, state, [5, 6], config=CFG)
    assert np.all(logits[1] == 0)
    for a, b in zip(state.conv + state.ssm, frozen.conv + frozen.ssm):
        np.testing.assert_array_equal(a[1], b[1])
        assert not np.array_equal(a[0], b[0])
    assert state.position.tolist() == [3, 2]


def test_decode_batch_width_mismatch():
    with pytest.raises(ValueError, match="batch"):
        decode_step(PARAMS, DecodeState.zeros(CFG, 2), [1], config=CFG)


def test_identical_prompts_identical_outputs():
    out = generate(PARAMS, [[3, 4, 5]] * 3, 12, config=CFG)
    assert out[0] == out[1] == out[2] and len(out[0]) == 12


@settings(max_examples=10, deadline=None)
@given(st.lists(st.lists(st.integers(1, 31), min_size=1, max_size=9), min_size=2, max_size=4),
       st.sampled_from(["parallel", "sequential"]))
def test_batched_generation_matches_solo(prompts, mode):
    batched = generate(PARAMS, prompts, 8, config=CFG, prefill_mode=mode, chunk=3)
    for p, row in zip(prompts, batched):
        assert row == generate(PARAMS, [p], 8, config=CFG)[0]


def test_stop_ids_end_rows_independently():
    free = generate(PARAMS, [[1, 2, 3], [9, 8]], 10, config=CFG)
    stop = free[0][3]
    out = generate(PARAMS, [[1, 2, 3], [9, 8]], 10, config=CFG, stop_ids=[stop])
    assert out[0] == free[0][:free[0].index(stop)]
    solo = generate(PARAMS, [[9, 8]], 10, config=CFG, stop_ids=[stop])
    assert out[1] == solo[0]


def test_low_temperature_is_greedy():
    greedy = generate(PARAMS, [[1, 5, 9]], 10, config=CFG)
    assert generate(PARAMS, [[1, 5, 9]], 10, config=CFG, temperature=1e-9, seed=4) == greedy


def test_temperature_sampling_seeded():
    a = generate(PARAMS, [[1, 5, 9]], 20, config=CFG, temperature=1.0, seed=4)
    assert a == generate(PARAMS, [[1, 5, 9]], 20, config=CFG, temperature=1.0, seed=4)
    assert a != generate(PARAMS, [[1, 5, 9]], 20, config=CFG, temperature=1.0, seed=5)


def test_sample_distribution():
    logits = np.log(np.array([[0.2, 0.5, 0.3]]))
    rng = np.random.default_rng(0)
    draws = np.array([sample(logits, 1.0, rng)[0] for _ in range(20_000)])
    np.testing.assert_allclose(np.bincount(draws, minlength=3) / 20_000, [0.2, 0.5, 0.3], atol=0.015)


def test_generate_errors():
    with pytest.raises(ValueError):
        generate(PARAMS, [], 4, config=CFG)
    with pytest.raises(ValueError):
        generate(PARAMS, [[1]], 0, config=CFG)
    with pytest.raises(ValueError):
        generate(PARAMS, [[1], []], 4, config=CFG)
