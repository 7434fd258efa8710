"""Generation: parallel and chunked prefill, constant-memory decode, batched sampling.

Prompts of different lengths share a batch through left padding. Padded
positions are zeroed before and after the causal convolution and never touch
the SSM state, so each row evolves exactly as it would alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .model import model_forward

PAD_ID = 0


class MemoryBudgetExceeded(MemoryError):
    pass


class TransientTracker:
    """Byte accounting for the activations a forward pass keeps alive.

    The residual stream entering the stack counts as live for the whole pass.
    Inside a layer every intermediate is counted until the layer ends, when the
    layer's output replaces its input. ``peak`` is the high-water mark; with a
    ``budget`` set, crossing it raises :class:`MemoryBudgetExceeded`.
    """

    def __init__(self, budget: int | None = None):
        self.budget = budget
        self.live = 0
        self.peak = 0
        self._mark = 0

    def _add(self, n: int) -> None:
        self.live += n
        if self.live > self.peak:
            self.peak = self.live
        if self.budget is not None and self.live > self.budget:
            raise MemoryBudgetExceeded(f"transient bytes {self.live} exceed budget {self.budget}")

    def persistent_input(self, x) -> None:
        self.live = 0
        self._add(x.nbytes)

    def begin_layer(self) -> None:
        self._mark = self.live

    def transient(self, *arrays) -> None:
        self._add(sum(a.nbytes for a in arrays))

    def end_layer(self, x) -> None:
        self.live = self._mark


@dataclass
class DecodeState:
    """Everything generation carries between tokens.

    ``conv[i]`` is (batch, d_inner, d_conv - 1), ``ssm[i]`` is (batch, d_inner, d_state).
    Rows with ``alive`` false are frozen.
    """

    conv: list
    ssm: list
    alive: np.ndarray
    position: np.ndarray

    @classmethod
    def zeros(cls, config: ModelConfig, batch: int) -> "DecodeState":
        di = config.d_inner
        return cls(conv=[np.zeros((batch, di, config.d_conv - 1)) for _ in range(config.n_layers)],
                   ssm=[np.zeros((batch, di, config.d_state)) for _ in range(config.n_layers)],
                   alive=np.ones(batch, dtype=bool), position=np.zeros(batch, dtype=np.int64))

    @property
    def batch(self) -> int:
        return self.alive.shape[0]

    @property
    def nbytes(self) -> int:
        arrays = [*self.conv, *self.ssm, self.alive, self.position]
        return int(sum(a.nbytes for a in arrays))

    def cache(self) -> list:
        return list(zip(self.conv, self.ssm))

    def copy(self) -> "DecodeState":
        return DecodeState([c.copy() for c in self.conv], [s.copy() for s in self.ssm],
                           self.alive.copy(), self.position.copy())


def state_nbytes(config: ModelConfig, batch: int) -> int:
    """Closed form for :attr:`DecodeState.nbytes`."""
    per_row = config.n_layers * config.d_inner * (config.d_conv - 1 + config.d_state) * 8 + 1 + 8
    return per_row * batch


@dataclass
class PaddedBatch:
    tokens: np.ndarray  # (batch, T_max) int64
    mask: np.ndarray  # (batch, T_max) bool, True on real tokens

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.ndim != 2 or self.tokens.shape != self.mask.shape or self.tokens.shape[0] == 0:
            raise ValueError(f"PaddedBatch: tokens {self.tokens.shape} and mask {self.mask.shape} "
                             "must be the same non-empty 2-D shape")
        if self.tokens.shape[1] == 0:
            raise ValueError("PaddedBatch: zero-length prompts")
        # left padding: once a row turns real it stays real
        if np.any(self.mask[:, :-1] & ~self.mask[:, 1:]):
            bad = np.nonzero(np.any(self.mask[:, :-1] & ~self.mask[:, 1:], axis=1))[0].tolist()
            raise ValueError(f"PaddedBatch: rows {bad} are not left-padded")

    @classmethod
    def from_prompts(cls, prompts, pad_id: int = PAD_ID) -> "PaddedBatch":
        prompts = [np.asarray(p, dtype=np.int64).reshape(-1) for p in prompts]
        if not prompts:
            raise ValueError("no prompts given")
        T = max(1, max(len(p) for p in prompts))
        tokens = np.full((len(prompts), T), pad_id, dtype=np.int64)
        mask = np.zeros((len(prompts), T), dtype=bool)
        for i, p in enumerate(prompts):
            if len(p):
                tokens[i, T - len(p):] = p
                mask[i, T - len(p):] = True
        return cls(tokens, mask)

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def _finish_prefill(logits, state: DecodeState, prompts: PaddedBatch):
    lengths = prompts.lengths
    state.position = lengths.astype(np.int64)
    state.alive = lengths > 0
    logits = np.where(state.alive[:, None], logits, 0.0)
    return state, logits


def prefill_parallel(params, prompts: PaddedBatch, *, config: ModelConfig, tracker=None):
    """Whole prompt in one forward pass. Transient memory grows with prompt length.

    Returns ``(state, last_logits)``; rows with no real tokens come back dead
    with a zero state and zero logits.
    """
    mask = None if prompts.mask.all() else prompts.mask
    logits, cache = model_forward(params, prompts.tokens, config=config, mask=mask,
                                  last_only=True, tracker=tracker)
    state = DecodeState([c for c, _ in cache], [h for _, h in cache],
                        np.ones(prompts.tokens.shape[0], bool), np.zeros(prompts.tokens.shape[0], np.int64))
    return _finish_prefill(logits, state, prompts)


def prefill_sequential(params, prompts: PaddedBatch, chunk_size: int, *, config: ModelConfig, tracker=None):
    """Prompt in chunks of ``chunk_size`` tokens, carrying the recurrent state.

    Same result as :func:`prefill_parallel`; transient memory depends on
    ``chunk_size`` only.
    """
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    B, T = prompts.tokens.shape
    state = DecodeState.zeros(config, B)
    cache = state.cache()
    logits = None
    for s in range(0, T, chunk_size):
        m = prompts.mask[:, s:s + chunk_size]
        logits, cache = model_forward(params, prompts.tokens[:, s:s + chunk_size], cache, config=config,
                                      mask=None if m.all() else m, last_only=True, tracker=tracker)
    state.conv = [c for c, _ in cache]
    state.ssm = [h for _, h in cache]
    return _finish_prefill(logits, state, prompts)


def prefill(params, prompts: PaddedBatch, *, config: ModelConfig, mode: str = "parallel", chunk: int = 64,
            tracker=None):
    if mode == "parallel":
        return prefill_parallel(params, prompts, config=config, tracker=tracker)
    if mode == "sequential":
        return prefill_sequential(params, prompts, chunk, config=config, tracker=tracker)
    raise ValueError(f"unknown prefill mode {mode!r}")


def decode_step(params, state: DecodeState, tokens, *, config: ModelConfig, tracker=None):
    """Advance every live row by one token. Dead rows keep their state and get zero logits.

    Updates ``state`` in place and returns ``(logits, state)``.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.shape[0] != state.batch:
        raise ValueError(f"decode_step: {tokens.shape[0]} tokens for a batch of {state.batch}")
    alive = state.alive
    all_alive = bool(alive.all())
    tokens = np.where(alive, tokens, PAD_ID)
    logits, cache = model_forward(params, tokens[:, None], state.cache(), config=config,
                                  mask=None if all_alive else alive[:, None], last_only=True, tracker=tracker)
    for i, (c, h) in enumerate(cache):
        if all_alive:
            state.conv[i], state.ssm[i] = c, h
        else:
            state.conv[i] = np.where(alive[:, None, None], c, state.conv[i])
            state.ssm[i] = np.where(alive[:, None, None], h, state.ssm[i])
    state.position = state.position + alive
    if not all_alive:
        logits = np.where(alive[:, None], logits, 0.0)
    return logits, state


def sample(logits, temperature: float = 0.0, rng: np.random.Generator | None = None):
    """Greedy argmax when ``temperature`` is 0, softmax sampling otherwise."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0:
        return np.argmax(logits, axis=-1)
    if rng is None:
        raise ValueError("temperature sampling needs an rng")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    # inverse-CDF draw, one uniform per row
    u = rng.random(p.shape[:-1])[..., None]
    idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def generate(params, prompts, max_new_tokens: int, *, config: ModelConfig, temperature: float = 0.0,
             seed: int = 0, stop_ids=(), prefill_mode: str = "parallel", chunk: int = 64) -> list[list[int]]:
    """Continue each prompt until a stop id or ``max_new_tokens``.

    Returns one list of new token ids per prompt, excluding the prompt and any
    stop id that ended the row.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    prompts = [list(p) for p in prompts]
    if not prompts:
        raise ValueError("no prompts given")
    if any(len(p) == 0 for p in prompts):
        raise ValueError("every prompt needs at least one token")
    batch = PaddedBatch.from_prompts(prompts)
    state, logits = prefill(params, batch, config=config, mode=prefill_mode, chunk=chunk)
    rng = np.random.default_rng(seed) if temperature > 0 else None
    stops = np.array(sorted(set(int(s) for s in stop_ids)), dtype=np.int64)
    out: list[list[int]] = [[] for _ in prompts]
    for n in range(max_new_tokens):
        tok = sample(logits, temperature, rng)
        stopped = np.isin(tok, stops)
        for i in np.nonzero(state.alive & ~stopped)[0]:
            out[i].append(int(tok[i]))
        state.alive = state.alive & ~stopped
        if not state.alive.any() or n == max_new_tokens - 1:
            break
        logits, state = decode_step(params, state, tok, config=config)
    return out
