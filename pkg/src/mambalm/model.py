"""Pure-Mamba causal LM with B/C/Δ stabilization norms and untied embeddings.

Params are a flat ``dict[str, ndarray]``. Layer tensors live under ``layers.{i}.*``:

    norm, in_proj, conv_weight, conv_bias, x_proj, dt_norm, B_norm, C_norm,
    dt_proj, dt_bias, A_log, D, out_proj

plus the top-level ``embedding``, ``head`` (absent when tied) and ``final_norm``.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import kernels as K
from .config import ModelConfig

LAYER_KEYS = ("norm", "in_proj", "conv_weight", "conv_bias", "x_proj", "dt_norm", "B_norm",
              "C_norm", "dt_proj", "dt_bias", "A_log", "D", "out_proj")

NO_DECAY_SUFFIXES = ("norm", "conv_bias", "dt_bias", "A_log", ".D")


def layer_params(params: dict, i: int) -> dict:
    prefix = f"layers.{i}."
    return {k: params[prefix + k] for k in LAYER_KEYS}


def head_weight(params: dict) -> np.ndarray:
    return params["head"] if "head" in params else params["embedding"].T


def decays(name: str) -> bool:
    """Whether AdamW weight decay applies to the named tensor."""
    return not name.endswith(NO_DECAY_SUFFIXES)


def param_shapes(config: ModelConfig) -> dict:
    d, di, V = config.d_model, config.d_inner, config.vocab_size
    R, N, Kc = config.dt_rank, config.d_state, config.d_conv
    shapes = {"embedding": (V, d)}
    if not config.tied_embedding:
        shapes["head"] = (d, V)
    shapes["final_norm"] = (d,)
    layer = {
        "norm": (d,), "in_proj": (d, 2 * di), "conv_weight": (di, Kc), "conv_bias": (di,),
        "x_proj": (di, R + 2 * N), "dt_norm": (R,), "B_norm": (N,), "C_norm": (N,),
        "dt_proj": (R, di), "dt_bias": (di,), "A_log": (di, N), "D": (di,), "out_proj": (di, d),
    }
    for i in range(config.n_layers):
        for k in LAYER_KEYS:
            shapes[f"layers.{i}.{k}"] = layer[k]
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    config.validate()
    rng = np.random.default_rng(seed)
    di, N = config.d_inner, config.d_state
    out_std = 0.02 / math.sqrt(2 * config.n_layers)
    params = {}
    for name, shape in param_shapes(config).items():
        key = name.rsplit(".", 1)[-1]
        if key in ("embedding", "head", "in_proj", "x_proj", "dt_proj"):
            arr = rng.normal(0.0, 0.02, shape)
        elif key == "out_proj":
            arr = rng.normal(0.0, out_std, shape)
        elif key == "conv_weight":
            bound = 1.0 / math.sqrt(config.d_conv)
            arr = rng.uniform(-bound, bound, shape)
        elif key == "A_log":
            arr = np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (di, 1))
        elif key == "dt_bias":
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), shape))
            arr = dt + np.log(-np.expm1(-dt))  # inverse softplus
        elif key == "D" or key.endswith("norm"):
            arr = np.ones(shape)
        else:  # conv_bias
            arr = np.zeros(shape)
        params[name] = arr
    return params


def param_count(params: dict) -> int:
    return sum(a.size for a in params.values())


# ---------------------------------------------------------------- block

def _block(lp, x, config, cache=None, mask=None, keep=False, tracker=None):
    """Shared forward for inference and training. Returns (y, cache', tape)."""
    eps = config.rmsnorm_eps
    di, R, N = config.d_inner, config.dt_rank, config.d_state
    lead = x.shape[:-2]
    conv_cache, h0 = (None, None) if cache is None else cache
    if conv_cache is None:
        conv_cache = np.zeros(lead + (di, config.d_conv - 1))
    if h0 is None:
        h0 = np.zeros(lead + (di, N))
    m = None if mask is None else mask[..., None].astype(np.float64)

    u = K.rmsnorm(x, lp["norm"], eps)
    xz = u @ lp["in_proj"]
    a, z = xz[..., :di], xz[..., di:]
    if m is not None:
        a = a * m  # zero padded positions before the convolution
    c, conv_out = K.causal_conv1d(a, lp["conv_weight"], lp["conv_bias"], conv_cache)
    if m is not None:
        c = c * m  # ...and after it
    v = K.silu(c)
    p = v @ lp["x_proj"]
    draw, Braw, Craw = p[..., :R], p[..., R:R + N], p[..., R + N:]
    if config.stabilization_norms:
        dn = K.rmsnorm(draw, lp["dt_norm"], eps)
        Bn = K.rmsnorm(Braw, lp["B_norm"], eps)
        Cn = K.rmsnorm(Craw, lp["C_norm"], eps)
    else:
        dn, Bn, Cn = draw, Braw, Craw
    dpre = dn @ lp["dt_proj"] + lp["dt_bias"]
    delta = K.softplus(dpre)
    A = -np.exp(lp["A_log"])
    if keep:
        s, hT, states_t, a_t = K.scan_with_states(A, lp["D"], h0, v, delta, Bn, Cn, mask)
    else:
        s, hT = K.selective_scan_seq(A, lp["D"], h0, v, delta, Bn, Cn, mask=mask)
    gz = K.silu(z)
    gated = s * gz
    y = x + gated @ lp["out_proj"]

    if tracker is not None:
        tracker.transient(u, xz, a, c, v, p, dn, Bn, Cn, dpre, delta, s, gz, gated, y)
    tape = None
    if keep:
        tape = dict(x=x, u=u, a=a, z=z, conv_cache=conv_cache, c=c, v=v, draw=draw, Braw=Braw,
                    Craw=Craw, dn=dn, Bn=Bn, Cn=Cn, dpre=dpre, delta=delta, A=A, h0=h0,
                    saved=(states_t, a_t), s=s, gz=gz, gated=gated, mask=mask)
    return y, (conv_out, hT), tape


def mamba_block_forward(layer_params, x_seq, cache=None, *, config: ModelConfig, mask=None):
    """Pre-norm residual Mamba block.

    ``cache`` is ``(conv_cache, ssm_state)`` for incremental calls; ``None`` starts
    from a zero state. Returns ``(y_seq, cache')``.
    """
    y, cache_out, _ = _block(layer_params, np.asarray(x_seq, dtype=np.float64), config, cache, mask)
    return y, cache_out


def _block_backward(lp, tape, dy, config):
    eps = config.rmsnorm_eps
    di, R, N = config.d_inner, config.dt_rank, config.d_state
    g = {}
    x = tape["x"]
    dx = dy.copy()
    # out_proj
    mm = K.matmul_backward(dy, tape["gated"], lp["out_proj"])
    g["out_proj"] = mm["w"]
    dgated = mm["x"]
    ds = dgated * tape["gz"]
    dz = K.silu_backward(dgated * tape["s"], tape["z"])["x"]
    sg = K.selective_scan_seq_backward(ds, tape["A"], lp["D"], tape["h0"], tape["v"], tape["delta"],
                                       tape["Bn"], tape["Cn"], mask=tape["mask"], saved=tape["saved"])
    g["D"] = sg["D"]
    g["A_log"] = sg["A"] * tape["A"]  # A = -exp(A_log)
    dv = sg["xs"]
    ddpre = K.softplus_backward(sg["deltas"], tape["dpre"])["x"]
    g["dt_bias"] = ddpre.reshape(-1, di).sum(axis=0)
    mm = K.matmul_backward(ddpre, tape["dn"], lp["dt_proj"])
    g["dt_proj"] = mm["w"]
    ddn, dBn, dCn = mm["x"], sg["Bs"], sg["Cs"]
    if config.stabilization_norms:
        r = K.rmsnorm_backward(ddn, tape["draw"], lp["dt_norm"], eps)
        ddraw, g["dt_norm"] = r["x"], r["gain"]
        r = K.rmsnorm_backward(dBn, tape["Braw"], lp["B_norm"], eps)
        dBraw, g["B_norm"] = r["x"], r["gain"]
        r = K.rmsnorm_backward(dCn, tape["Craw"], lp["C_norm"], eps)
        dCraw, g["C_norm"] = r["x"], r["gain"]
    else:
        ddraw, dBraw, dCraw = ddn, dBn, dCn
        for k in ("dt_norm", "B_norm", "C_norm"):
            g[k] = np.zeros_like(lp[k])
    dp = np.concatenate([ddraw, dBraw, dCraw], axis=-1)
    mm = K.matmul_backward(dp, tape["v"], lp["x_proj"])
    g["x_proj"] = mm["w"]
    dv = dv + mm["x"]
    dc = K.silu_backward(dv, tape["c"])["x"]
    m = tape["mask"]
    if m is not None:
        dc = dc * m[..., None]
    cg = K.causal_conv1d_backward(dc, tape["a"], lp["conv_weight"], lp["conv_bias"], tape["conv_cache"])
    g["conv_weight"], g["conv_bias"] = cg["weights"], cg["bias"]
    da = cg["x"]
    if m is not None:
        da = da * m[..., None]
    dxz = np.concatenate([da, dz], axis=-1)
    mm = K.matmul_backward(dxz, tape["u"], lp["in_proj"])
    g["in_proj"] = mm["w"]
    r = K.rmsnorm_backward(mm["x"], x, lp["norm"], eps)
    g["norm"] = r["gain"]
    dx = dx + r["x"]
    return dx, g


# ---------------------------------------------------------------- model

def _check_tokens(tokens, vocab_size):
    tokens = np.asarray(tokens)
    if tokens.ndim not in (1, 2) or tokens.shape[-1] < 1:
        raise ValueError(f"tokens must be a non-empty 1-D or 2-D int array, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("tokens must be integers")
    if tokens.min() < 0 or tokens.max() >= vocab_size:
        raise IndexError(f"token id out of range [0, {vocab_size})")
    return tokens


def model_forward(params, tokens, cache=None, *, config: ModelConfig, mask=None,
                  last_only=False, tracker=None):
    """Embed, run every block, final norm, project to vocabulary logits.

    tokens: (T,) or (B, T). ``cache`` is a list of per-layer ``(conv, ssm)`` pairs
    or ``None``. With ``last_only`` only the final position's logits are computed.
    Returns ``(logits, cache')``.
    """
    tokens = _check_tokens(tokens, config.vocab_size)
    x = params["embedding"][tokens]
    if tracker is not None:
        tracker.persistent_input(x)
    new_cache = []
    for i in range(config.n_layers):
        layer_cache = None if cache is None else cache[i]
        if tracker is not None:
            tracker.begin_layer()
        x, c, _ = _block(layer_params(params, i), x, config, layer_cache, mask, tracker=tracker)
        if tracker is not None:
            tracker.end_layer(x)
        new_cache.append(c)
    if last_only:
        x = x[..., -1:, :]
    hn = K.rmsnorm(x, params["final_norm"], config.rmsnorm_eps)
    logits = hn @ head_weight(params)
    if tracker is not None:
        tracker.transient(hn, logits)
    if last_only:
        logits = logits[..., 0, :]
    return logits, new_cache


def loss(logits, targets, loss_mask=None, z_coeff=0.0):
    """Mean masked cross-entropy plus optional z-loss on the log-partition."""
    return K.cross_entropy(logits, targets, loss_mask, z_coeff)


def loss_and_grads(params, tokens, targets, loss_mask=None, *, config: ModelConfig, z_coeff=0.0):
    """Training forward + full reverse pass. Returns (loss, grads dict)."""
    tokens = _check_tokens(tokens, config.vocab_size)
    x = params["embedding"][tokens]
    tapes = []
    for i in range(config.n_layers):
        x, _, tape = _block(layer_params(params, i), x, config, keep=True)
        tapes.append(tape)
    hn = K.rmsnorm(x, params["final_norm"], config.rmsnorm_eps)
    W = head_weight(params)
    logits = hn @ W
    value = K.cross_entropy(logits, targets, loss_mask, z_coeff)

    grads = {}
    dlogits = K.cross_entropy_backward(1.0, logits, targets, loss_mask, z_coeff)["logits"]
    mm = K.matmul_backward(dlogits, hn, W)
    r = K.rmsnorm_backward(mm["x"], x, params["final_norm"], config.rmsnorm_eps)
    grads["final_norm"] = r["gain"]
    dx = r["x"]
    for i in reversed(range(config.n_layers)):
        lp = layer_params(params, i)
        dx, g = _block_backward(lp, tapes[i], dx, config)
        for k, v in g.items():
            grads[f"layers.{i}.{k}"] = v
    demb = K.embedding_backward(dx, params["embedding"], tokens)["table"]
    if "head" in params:
        grads["head"] = mm["w"]
    else:
        demb = demb + mm["w"].T
    grads["embedding"] = demb
    return value, grads
