"""Minimal decoder-only transformer with a KV cache, used as the scaling contrast in benchmarks.

Pre-norm blocks (causal multi-head attention, then a SiLU MLP), no positional
encoding. Causal masking alone orders the tokens, which is enough for a
memory and latency baseline.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .config import AttentionBaselineConfig, ConfigError


class KVCache:
    """Per-layer keys and values, grown by amortised doubling.

    ``nbytes`` is the exact logical footprint, 2 * n_layers * batch * T * n_heads * head_dim * 8.
    Spare capacity in the backing buffers is not counted.
    """

    def __init__(self, config: AttentionBaselineConfig, batch: int = 1, capacity: int = 256):
        self.config = config
        self.batch = batch
        self.length = 0
        shape = (batch, config.n_heads, capacity, config.head_dim)
        self._k = [np.zeros(shape) for _ in range(config.n_layers)]
        self._v = [np.zeros(shape) for _ in range(config.n_layers)]

    def _ensure(self, n: int) -> None:
        cap = self._k[0].shape[2]
        if n <= cap:
            return
        while cap < n:
            cap *= 2
        for buf in (self._k, self._v):
            for i, old in enumerate(buf):
                new = np.zeros(old.shape[:2] + (cap,) + old.shape[3:])
                new[:, :, :self.length] = old[:, :, :self.length]
                buf[i] = new

    def append(self, layer: int, k, v) -> tuple[np.ndarray, np.ndarray]:
        """Write (batch, heads, t, head_dim) keys/values after the current length; return the full views."""
        end = self.length + k.shape[2]
        self._ensure(end)
        self._k[layer][:, :, self.length:end] = k
        self._v[layer][:, :, self.length:end] = v
        return self._k[layer][:, :, :end], self._v[layer][:, :, :end]

    def advance(self, t: int) -> None:
        self.length += t

    @property
    def nbytes(self) -> int:
        c = self.config
        return 2 * c.n_layers * self.batch * self.length * c.n_heads * c.head_dim * 8


def kv_bytes_closed_form(config: AttentionBaselineConfig, T: int, batch: int = 1) -> int:
    return 2 * config.n_layers * batch * T * config.n_heads * config.head_dim * 8


class AttentionLM:
    def __init__(self, config: AttentionBaselineConfig, seed: int = 0):
        try:
            config.validate()
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        self.config = config
        rng = np.random.default_rng(seed)
        d, V, L = config.d_model, config.vocab_size, config.n_layers
        self.params = {"embedding": rng.normal(0, 0.02, (V, d)), "head": rng.normal(0, 0.02, (d, V)),
                       "final_norm": np.ones(d)}
        for i in range(L):
            self.params.update({
                f"layers.{i}.norm1": np.ones(d),
                f"layers.{i}.wqkv": rng.normal(0, 0.02, (d, 3 * d)),
                f"layers.{i}.wo": rng.normal(0, 0.02 / np.sqrt(2 * L), (d, d)),
                f"layers.{i}.norm2": np.ones(d),
                f"layers.{i}.w1": rng.normal(0, 0.02, (d, 4 * d)),
                f"layers.{i}.w2": rng.normal(0, 0.02 / np.sqrt(2 * L), (4 * d, d)),
            })

    def new_cache(self, batch: int = 1) -> KVCache:
        return KVCache(self.config, batch)

    def _heads(self, x):
        B, T, _ = x.shape
        return x.reshape(B, T, self.config.n_heads, self.config.head_dim).transpose(0, 2, 1, 3)

    def _layer(self, i, x, cache: KVCache | None, tracker=None):
        p = self.params
        H, hd = self.config.n_heads, self.config.head_dim
        B, T, d = x.shape
        qkv = K.rmsnorm(x, p[f"layers.{i}.norm1"]) @ p[f"layers.{i}.wqkv"]
        q, k, v = (self._heads(qkv[..., j * d:(j + 1) * d]) for j in range(3))
        if cache is not None:
            k, v = cache.append(i, k, v)
        S = k.shape[2]
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
        # query t sits at absolute position S - T + t
        causal = np.arange(S)[None, :] <= (S - T + np.arange(T))[:, None]
        scores = np.where(causal, scores, -np.inf)
        w = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w /= w.sum(axis=-1, keepdims=True)
        att = (w @ v).transpose(0, 2, 1, 3).reshape(B, T, H * hd)
        x = x + att @ p[f"layers.{i}.wo"]
        hdn = K.silu(K.rmsnorm(x, p[f"layers.{i}.norm2"]) @ p[f"layers.{i}.w1"])
        y = x + hdn @ p[f"layers.{i}.w2"]
        if tracker is not None:
            tracker.transient(qkv, scores, w, att, x, hdn, y)
        return y

    def forward(self, tokens, cache: KVCache | None = None, tracker=None):
        """Logits for (T,) or (B, T) tokens; with a cache, tokens continue its contents."""
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise IndexError(f"token id out of range [0, {self.config.vocab_size})")
        if cache is not None and cache.batch != tokens.shape[0]:
            raise ValueError(f"cache batch {cache.batch} != token batch {tokens.shape[0]}")
        x = self.params["embedding"][tokens]
        if tracker is not None:
            tracker.persistent_input(x)
        for i in range(self.config.n_layers):
            if tracker is not None:
                tracker.begin_layer()
            x = self._layer(i, x, cache, tracker)
            if tracker is not None:
                tracker.end_layer(x)
        if cache is not None:
            cache.advance(tokens.shape[1])
        hn = K.rmsnorm(x, self.params["final_norm"])
        logits = hn @ self.params["head"]
        if tracker is not None:
            tracker.transient(hn, logits)
        return logits[0] if squeeze else logits

    def decode_step(self, cache: KVCache, tokens, tracker=None):
        """One token per row; returns (batch, vocab) logits and grows the cache by one position."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        return self.forward(tokens, cache, tracker)[:, -1]


def attention_decode_baseline(config: AttentionBaselineConfig, seed: int = 0) -> AttentionLM:
    return AttentionLM(config, seed)
