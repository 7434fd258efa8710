"""Numeric primitives of the Mamba block and their exact reverse-mode gradients.

All arrays are float64 numpy arrays. Sequence ops take ``(..., T, C)`` inputs so a
leading batch axis is optional. Every forward op has a ``*_backward`` counterpart;
:func:`grad` dispatches to them by name.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

SOFTPLUS_THRESHOLD = 20.0


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def _check_finite(**arrays: np.ndarray) -> None:
    for name, arr in arrays.items():
        if arr is not None and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{name} contains NaN or Inf")


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------- elementwise

def softplus(x):
    """log(1 + exp(x)), exact for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    big = x > SOFTPLUS_THRESHOLD
    safe = np.where(big, 0.0, x)
    out = np.where(big, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(safe)))
    return out if out.ndim else float(out)


def softplus_backward(dy, x):
    return {"x": np.asarray(dy) * _sigmoid(x)}


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * _sigmoid(x)


def silu_backward(dy, x):
    s = _sigmoid(x)
    return {"x": np.asarray(dy) * s * (1.0 + x * (1.0 - s))}


# ---------------------------------------------------------------- rmsnorm

def rmsnorm(x, gain, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1:] != gain.shape:
        raise ShapeError(f"rmsnorm: last axis {x.shape[-1:]} != gain {gain.shape}")
    if eps < 0:
        raise ValueError("rmsnorm: eps must be non-negative")
    _check_finite(x=x, gain=gain)
    r = _rms_inv(x, eps)
    return x * r * gain


def _rms_inv(x, eps):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = 1.0 / np.sqrt(ms + eps)
    # eps=0 on an all-zero row: define the output as zero
    return np.where(np.isfinite(r), r, 0.0)


def rmsnorm_backward(dy, x, gain, eps=1e-6):
    r = _rms_inv(x, eps)
    gy = dy * gain
    d = x.shape[-1]
    dx = r * gy - (r**3) * x * np.sum(gy * x, axis=-1, keepdims=True) / d
    dgain = np.sum((dy * x * r).reshape(-1, d), axis=0)
    return {"x": dx, "gain": dgain}


# ---------------------------------------------------------------- linear / embedding

def matmul(x, w):
    return np.asarray(x) @ np.asarray(w)


def matmul_backward(dy, x, w):
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    return {"x": dx, "w": dw}


def embedding(table, ids):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    return table[ids]


def embedding_backward(dy, table, ids):
    dtable = np.zeros_like(table)
    np.add.at(dtable, np.asarray(ids).reshape(-1), dy.reshape(-1, table.shape[1]))
    return {"table": dtable}


# ---------------------------------------------------------------- loss

def logsumexp(logits):
    m = np.max(logits, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True)))[..., 0]


def cross_entropy(logits, targets, mask=None, z_coeff=0.0):
    """Mean masked cross-entropy plus ``z_coeff * mean(logsumexp**2)``.

    ``mask`` is true where a position is supervised.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise ShapeError("cross_entropy: logits/targets/mask shapes disagree")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    lse = logsumexp(logits)
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    ce = np.where(mask, lse - picked, 0.0).sum() / n
    z = np.where(mask, lse * lse, 0.0).sum() / n
    return float(ce + z_coeff * z)


def cross_entropy_backward(dloss, logits, targets, mask=None, z_coeff=0.0):
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    lse = logsumexp(logits)
    p = np.exp(logits - lse[..., None])
    g = p * (1.0 + 2.0 * z_coeff * lse[..., None])
    np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], -1) - 1.0, -1)
    g *= (mask / n)[..., None] * dloss
    return {"logits": g}


# ---------------------------------------------------------------- causal conv

def causal_conv1d(x, weights, bias, cache=None):
    """Depthwise causal convolution with a rolling input cache.

    x: (..., T, C); weights: (C, K); bias: (C,); cache: (..., C, K-1) holding the
    last K-1 inputs seen (zeros for a fresh sequence).
    Returns (y, new_cache) with the same shapes as (x, cache).
    """
    x = np.asarray(x, dtype=np.float64)
    C, K = weights.shape
    if x.shape[-1] != C or bias.shape != (C,):
        raise ShapeError(f"causal_conv1d: channels {x.shape[-1]} vs weights {weights.shape}")
    if cache is None:
        cache = np.zeros(x.shape[:-2] + (C, K - 1))
    if cache.shape != x.shape[:-2] + (C, K - 1):
        raise ShapeError(f"causal_conv1d: cache shape {cache.shape}, expected width {K - 1}")
    _check_finite(x=x, weights=weights, bias=bias, cache=cache)
    T = x.shape[-2]
    x_ext = np.concatenate([np.swapaxes(cache, -1, -2), x], axis=-2)
    y = np.broadcast_to(bias, x.shape).copy()
    for k in range(K):
        y += weights[:, k] * x_ext[..., k : k + T, :]
    new_cache = np.swapaxes(x_ext[..., x_ext.shape[-2] - (K - 1) :, :], -1, -2).copy()
    return y, new_cache


def causal_conv1d_backward(dy, x, weights, bias, cache=None, dcache_out=None):
    C, K = weights.shape
    T = x.shape[-2]
    if cache is None:
        cache = np.zeros(x.shape[:-2] + (C, K - 1))
    x_ext = np.concatenate([np.swapaxes(cache, -1, -2), x], axis=-2)
    dx_ext = np.zeros_like(x_ext)
    dw = np.zeros_like(weights)
    for k in range(K):
        dx_ext[..., k : k + T, :] += dy * weights[:, k]
        dw[:, k] = np.sum((dy * x_ext[..., k : k + T, :]).reshape(-1, C), axis=0)
    if dcache_out is not None and K > 1:
        dx_ext[..., T:, :] += np.swapaxes(dcache_out, -1, -2)
    db = np.sum(dy.reshape(-1, C), axis=0)
    dcache = np.swapaxes(dx_ext[..., : K - 1, :], -1, -2)
    return {"x": dx_ext[..., K - 1 :, :], "weights": dw, "bias": db, "cache": dcache}


# ---------------------------------------------------------------- selective scan
#
# Discretisation: Abar = exp(delta * A) (zero-order hold), input coupling delta * B * x
# (Euler). Masked positions (mask False) leave the state untouched.

def _scan_step(A, D, h, x_t, d_t, B_t, C_t):
    a = np.exp(d_t[..., :, None] * A)
    h = a * h + (d_t * x_t)[..., :, None] * B_t[..., None, :]
    y = np.einsum("...dn,...n->...d", h, C_t) + D * x_t
    return y, h


def _check_scan(A, D, h, x, delta, B, C, mask=None):
    if np.any(A >= 0):
        raise ValueError("selective scan: A must be strictly negative")
    di, N = A.shape
    if D.shape != (di,) or h.shape[-2:] != (di, N):
        raise ShapeError("selective scan: A/D/h shapes disagree")
    if x.shape != delta.shape or x.shape[-1] != di:
        raise ShapeError("selective scan: x/delta shapes disagree")
    if B.shape[-1] != N or C.shape[-1] != N or B.shape[:-1] != x.shape[:-1] or C.shape != B.shape:
        raise ShapeError("selective scan: B/C shapes disagree")
    _check_finite(A=A, D=D, h=h, x=x, delta=delta, B=B, C=C)
    live = delta if mask is None else delta[np.broadcast_to(mask[..., None], delta.shape)]
    if np.any(live <= 0):
        raise ValueError("selective scan: delta must be positive")


def selective_scan_step(A, D, h, x_t, delta_t, B_t, C_t):
    """One recurrence step. Returns (y_t, h_new)."""
    A, D, h = (np.asarray(v, dtype=np.float64) for v in (A, D, h))
    x_t, delta_t, B_t, C_t = (np.asarray(v, dtype=np.float64) for v in (x_t, delta_t, B_t, C_t))
    _check_scan(A, D, h, x_t, delta_t, B_t, C_t)
    return _scan_step(A, D, h, x_t, delta_t, B_t, C_t)


def selective_scan_seq(A, D, h0, xs, deltas, Bs, Cs, mask=None, return_states=False):
    """Fold :func:`selective_scan_step` over the T axis.

    xs, deltas: (..., T, d_inner); Bs, Cs: (..., T, N); h0: (..., d_inner, N);
    mask: optional (..., T) bool. Returns (ys, hT) or (ys, hT, states) where states
    holds h after every step, shape (..., T, d_inner, N).

    Without ``return_states`` the fold runs step by step in O(d_inner * N) scratch;
    with it the discretised operands are materialised for all T up front.
    """
    A, D = np.asarray(A, dtype=np.float64), np.asarray(D, dtype=np.float64)
    xs, deltas = np.asarray(xs, dtype=np.float64), np.asarray(deltas, dtype=np.float64)
    Bs, Cs = np.asarray(Bs, dtype=np.float64), np.asarray(Cs, dtype=np.float64)
    if h0 is None:
        h0 = np.zeros(xs.shape[:-2] + A.shape)
    _check_scan(A, D, h0, xs, deltas, Bs, Cs, mask)
    if return_states:
        ys, hT, states_t, _ = scan_with_states(A, D, h0, xs, deltas, Bs, Cs, mask)
        return ys, hT, _untmajor(states_t, -3)
    T = xs.shape[-2]
    ys = np.empty_like(xs)
    h = h0
    for t in range(T):
        y, h_new = _scan_step(A, D, h, xs[..., t, :], deltas[..., t, :], Bs[..., t, :], Cs[..., t, :])
        if mask is not None:
            m = mask[..., t]
            h_new = np.where(m[..., None, None], h_new, h)
            y = np.where(m[..., None], y, D * xs[..., t, :])
        h = h_new
        ys[..., t, :] = y
    return ys, h


def _tmajor(arr, axis=-2):
    return np.ascontiguousarray(np.moveaxis(arr, axis, 0))


def _untmajor(arr, axis=-2):
    return np.moveaxis(arr, 0, axis)


def _discretize(A, xs, deltas, Bs, mask):
    """Time-major (T, ..., d_inner, N) decay factors and input terms."""
    d = _tmajor(deltas)
    a = np.exp(d[..., None] * A)
    u = (d * _tmajor(xs))[..., None] * _tmajor(Bs)[..., None, :]
    if mask is not None:
        m = _tmajor(mask, -1)[..., None, None]
        a = np.where(m, a, 1.0)
        u = np.where(m, u, 0.0)
    return a, u


def scan_with_states(A, D, h0, xs, deltas, Bs, Cs, mask=None):
    """Unchecked training-path forward. Returns (ys, hT, states_t, a_t).

    ``states_t`` and ``a_t`` are time-major (T, ..., d_inner, N); pass them to
    :func:`selective_scan_seq_backward` to skip recomputation.
    """
    a, u = _discretize(A, xs, deltas, Bs, mask)
    states = u  # overwritten in place
    h = h0
    for t in range(a.shape[0]):
        h = a[t] * h + u[t]
        states[t] = h
    ys = _untmajor(np.matmul(states, _tmajor(Cs)[..., None])[..., 0]) + D * xs
    if mask is not None:
        ys = np.where(mask[..., None], ys, D * xs)
    return ys, h, states, a


def selective_scan_seq_backward(dys, A, D, h0, xs, deltas, Bs, Cs, mask=None, states=None, dhT=None, saved=None):
    """Reverse pass of :func:`selective_scan_seq`.

    Returns grads for A, D, h0, xs, deltas, Bs, Cs. Pass either ``states`` from
    ``return_states=True`` or ``saved=(states_t, a_t)`` from :func:`scan_with_states`
    to skip recomputing the forward.
    """
    if h0 is None:
        h0 = np.zeros(xs.shape[:-2] + A.shape)
    T = xs.shape[-2]
    if saved is not None:
        states_t, a = saved
    elif states is not None:
        states_t = _tmajor(states, -3)
        a, _ = _discretize(A, xs, deltas, Bs, mask)
    else:
        _, _, states_t, a = scan_with_states(A, D, h0, xs, deltas, Bs, Cs, mask)
    ro = dys if mask is None else dys * mask[..., None]
    ro_t, C_t, B_t = _tmajor(ro), _tmajor(Cs), _tmajor(Bs)
    gs = ro_t[..., :, None] * C_t[..., None, :]
    ga = np.empty_like(gs)
    carry = np.zeros(h0.shape) if dhT is None else np.asarray(dhT, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        gs[t] += carry
        np.multiply(a[t], gs[t], out=ga[t])
        carry = ga[t]
    dh0 = carry.copy()
    if mask is not None:
        m = _tmajor(mask, -1)[..., None, None]
        gs *= m
        ga *= m
    # da = g * a * h_prev, built in place in ga
    ga[1:] *= states_t[:-1]
    ga[0] *= h0
    d_t, x_t = _tmajor(deltas), _tmajor(xs)
    dA = (ga * d_t[..., None]).reshape(-1, *A.shape).sum(axis=0)
    gB = np.matmul(gs, B_t[..., None])[..., 0]
    ddeltas = np.sum(ga * A, axis=-1) + gB * x_t
    dB = np.matmul(np.swapaxes(gs, -1, -2), (d_t * x_t)[..., None])[..., 0]
    dC = np.matmul(np.swapaxes(states_t, -1, -2), ro_t[..., None])[..., 0]
    return {
        "A": dA,
        "D": np.sum((dys * xs).reshape(-1, xs.shape[-1]), axis=0),
        "h0": dh0,
        "xs": dys * D + _untmajor(gB) * deltas,
        "deltas": _untmajor(ddeltas),
        "Bs": _untmajor(dB),
        "Cs": _untmajor(dC),
    }


# ---------------------------------------------------------------- dispatcher

_BACKWARD: dict[str, Callable] = {
    "rmsnorm": rmsnorm_backward,
    "softplus": softplus_backward,
    "silu": silu_backward,
    "causal_conv1d": causal_conv1d_backward,
    "selective_scan_seq": selective_scan_seq_backward,
    "matmul": matmul_backward,
    "embedding": embedding_backward,
    "cross_entropy": cross_entropy_backward,
}


def grad(op_name: str, inputs: dict, upstream) -> dict:
    """Analytic gradients of ``op_name`` w.r.t. its differentiable inputs.

    ``inputs`` are the forward keyword arguments; ``upstream`` is the gradient of
    the loss w.r.t. the op output (for ``selective_scan_seq`` either dys or a
    ``(dys, dhT)`` pair; for ``causal_conv1d`` either dy or ``(dy, dcache_out)``).
    """
    try:
        fn = _BACKWARD[op_name]
    except KeyError:
        raise KeyError(f"no gradient registered for op {op_name!r}") from None
    if op_name == "selective_scan_seq" and isinstance(upstream, tuple):
        dys, dhT = upstream
        return fn(dys, **inputs, dhT=dhT)
    if op_name == "causal_conv1d" and isinstance(upstream, tuple):
        dy, dcache = upstream
        return fn(dy, **inputs, dcache_out=dcache)
    return fn(upstream, **inputs)
