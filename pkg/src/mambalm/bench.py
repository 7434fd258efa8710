"""Generation throughput and memory benchmarks, Mamba vs. a KV-cache transformer.

Timing protocol: prompt of one token, then greedy decode. A first untimed pass
generates the sequence and snapshots the model state at the start of every
record window. The timed pass then steps all windows round-robin, one token
each in turn, so every window is sampled over the same stretch of wall-clock
time and slow drift in machine speed cancels out of the comparison. Each step
is timed with ``perf_counter`` with the garbage collector paused. A record at
position P (tokens held in the model's context) reports the median step time of
its window, then the median over repetitions. Memory is exact byte accounting,
never allocator probes.
"""

from __future__ import annotations

import copy
import csv
import gc
import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attention import AttentionLM
from .config import AttentionBaselineConfig, ModelConfig
from .inference import (MemoryBudgetExceeded, PaddedBatch, TransientTracker, decode_step,
                        prefill_parallel, prefill_sequential)
from .model import init_params

REPORT_COLUMNS = ("model", "phase", "position", "sec_per_token", "state_bytes", "peak_transient_bytes")
MODELS = ("mamba", "attention")
PROMPT_TOKEN = 10


@dataclass(frozen=True)
class BenchRecord:
    model: str
    phase: str
    position: int
    sec_per_token: float
    state_bytes: int
    peak_transient_bytes: int


class _MambaRunner:
    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.params = init_params(config, seed)

    def start(self):
        state, logits = prefill_parallel(self.params, PaddedBatch.from_prompts([[PROMPT_TOKEN]]), config=self.config)
        return state, logits

    def step(self, state, tok, tracker):
        return decode_step(self.params, state, tok, config=self.config, tracker=tracker)

    @staticmethod
    def nbytes(state) -> int:
        return state.nbytes

    @staticmethod
    def snapshot(state):
        return state.copy()


class _AttentionRunner:
    def __init__(self, config: AttentionBaselineConfig, seed: int):
        self.model = AttentionLM(config, seed)

    def start(self):
        cache = self.model.new_cache(1)
        logits = self.model.forward(np.array([[PROMPT_TOKEN]]), cache)[:, -1]
        return cache, logits

    def step(self, cache, tok, tracker):
        return self.model.decode_step(cache, tok, tracker), cache

    @staticmethod
    def nbytes(cache) -> int:
        return cache.nbytes

    @staticmethod
    def snapshot(cache):
        return copy.deepcopy(cache)


def _runner(tag: str, model_config, attention_config, seed):
    if tag == "mamba":
        return _MambaRunner(model_config or ModelConfig(), seed)
    if tag == "attention":
        return _AttentionRunner(attention_config or AttentionBaselineConfig(), seed)
    raise ValueError(f"unknown model tag {tag!r}; expected one of {MODELS}")


def _snapshots(runner, n_tokens: int, record_every: int):
    """Untimed greedy pass; (state, logits) at the start of each record window.

    Window j covers the steps that bring the context to positions
    (start_j, end_j], with end_j a multiple of ``record_every``.
    """
    state, logits = runner.start()
    position = 1
    windows = []
    start = (state, logits, position)
    for _ in range(n_tokens):
        if position % record_every == 0 or position == 1:
            start = (runner.snapshot(state), logits.copy(), position)
        logits, state = runner.step(state, np.argmax(logits, axis=-1), None)
        position += 1
        if position % record_every == 0:
            windows.append((*start, position))
    return windows


def _timed_pass(runner, windows):
    """Step every window round-robin; return per-window (median step time, bytes, peak)."""
    live = [[runner.snapshot(st), lg, end - pos] for st, lg, pos, end in windows]
    times = [[] for _ in windows]
    trackers = [TransientTracker() for _ in windows]
    while any(w[2] for w in live):
        for j, w in enumerate(live):
            if not w[2]:
                continue
            tok = np.argmax(w[1], axis=-1)
            t0 = time.perf_counter()
            w[1], w[0] = runner.step(w[0], tok, trackers[j])
            times[j].append(time.perf_counter() - t0)
            w[2] -= 1
    return [(float(np.median(t)), runner.nbytes(w[0]), tr.peak) for t, w, tr in zip(times, live, trackers)]


def run_generation_bench(tag: str, n_tokens: int, record_every: int, repetitions: int = 3, *,
                         model_config: ModelConfig | None = None,
                         attention_config: AttentionBaselineConfig | None = None,
                         seed: int = 0, warmup_steps: int = 32) -> list[BenchRecord]:
    """Greedy decode from a one-token prompt, recording every ``record_every`` positions."""
    if record_every < 1 or n_tokens < record_every:
        raise ValueError("need n_tokens >= record_every >= 1")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    runner = _runner(tag, model_config, attention_config, seed)
    state, logits = runner.start()
    for _ in range(warmup_steps):
        logits, state = runner.step(state, np.argmax(logits, axis=-1), None)
    windows = _snapshots(runner, n_tokens, record_every)
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        runs = [_timed_pass(runner, windows) for _ in range(repetitions)]
    finally:
        if was_enabled:
            gc.enable()
    records = []
    for j, (_, _, _, end) in enumerate(windows):
        sec = float(np.median([run[j][0] for run in runs]))
        _, nbytes, peak = runs[0][j]
        records.append(BenchRecord(tag, "decode", end, sec, nbytes, peak))
    return records


def run_prefill_bench(lengths, *, model_config: ModelConfig | None = None, mode: str = "parallel",
                      chunk: int = 64, seed: int = 0) -> list[BenchRecord]:
    """Prefill time per prompt token, state bytes and peak transient bytes vs. prompt length."""
    config = model_config or ModelConfig()
    params = init_params(config, seed)
    rng = np.random.default_rng(seed)
    records = []
    for T in sorted(set(int(n) for n in lengths)):
        batch = PaddedBatch.from_prompts([rng.integers(1, config.vocab_size, size=T)])
        tracker = TransientTracker()
        t0 = time.perf_counter()
        if mode == "parallel":
            state, _ = prefill_parallel(params, batch, config=config, tracker=tracker)
        else:
            state, _ = prefill_sequential(params, batch, chunk, config=config, tracker=tracker)
        sec = (time.perf_counter() - t0) / T
        records.append(BenchRecord(f"mamba-{mode}", "prefill", T, sec, state.nbytes, tracker.peak))
    return records


def parallel_prefill_peak(params, config: ModelConfig, T: int) -> int:
    tracker = TransientTracker()
    prefill_parallel(params, PaddedBatch.from_prompts([np.ones(T, dtype=np.int64)]), config=config, tracker=tracker)
    return tracker.peak


def max_parallel_prompt(params, config: ModelConfig, budget: int, upper: int = 1 << 20) -> int:
    """Longest prompt parallel prefill completes within ``budget`` transient bytes (0 if none)."""
    def fits(T):
        try:
            prefill_parallel(params, PaddedBatch.from_prompts([np.ones(T, dtype=np.int64)]), config=config,
                             tracker=TransientTracker(budget))
            return True
        except MemoryBudgetExceeded:
            return False

    # peak bytes are affine in T, so two probes locate the limit; confirm it by direct runs
    p1, p2 = parallel_prefill_peak(params, config, 1), parallel_prefill_peak(params, config, 2)
    guess = min(upper, max(0, (budget - p1) // (p2 - p1) + 1))
    while guess > 0 and not fits(guess):
        guess -= 1
    while guess < upper and fits(guess + 1):
        guess += 1
    return guess


def fit_memory_slope(records) -> dict:
    """Ordinary least squares of state bytes on position.

    A series with zero variance in bytes gets slope 0 and R² = 1 by convention.
    """
    records = list(records)
    if len(records) < 3:
        raise ValueError("fit_memory_slope needs at least 3 records")
    x = np.array([r.position for r in records], dtype=np.float64)
    y = np.array([r.state_bytes for r in records], dtype=np.float64)
    return fit_line(x, y)


def fit_line(x, y) -> dict:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    sxx = np.sum((x - x.mean()) ** 2)
    if sxx == 0:
        raise ValueError("degenerate fit: all positions equal")
    slope = float(np.sum((x - x.mean()) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - (intercept + slope * x)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return {"slope": slope, "intercept": intercept, "r2": r2}


def time_flatness(records) -> float:
    """Last record's per-token time relative to the first's."""
    return records[-1].sec_per_token / records[0].sec_per_token


def emit_report(records, path, format: str = "csv") -> Path:
    path = Path(path)
    rows = [asdict(r) for r in records]
    if format == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    elif format == "json":
        path.write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {format!r}")
    return path


def read_report(path, format: str = "csv") -> list[BenchRecord]:
    path = Path(path)
    if format == "json":
        return [BenchRecord(**row) for row in json.loads(path.read_text(encoding="utf-8"))]
    types = {f.name: f.type for f in fields(BenchRecord)}
    conv = {"str": str, "int": int, "float": float}
    with open(path, newline="", encoding="utf-8") as fh:
        return [BenchRecord(**{k: conv[types[k]](v) for k, v in row.items()}) for row in csv.DictReader(fh)]
