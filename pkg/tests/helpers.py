"""Shared test oracles: central finite differences and random model params."""

import numpy as np


def numeric_grad(f, x, eps=1e-5, idx=None):
    """Central-difference gradient of scalar ``f`` w.r.t. array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.ndindex(x.shape) if idx is None else idx
    for i in it:
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def random_params(config, seed, scale=1.0):
    """Params with O(1) activations: weights ~ N(0, scale^2 / fan_in).

    Livelier dynamics than the training init, so equivalence tests exercise the
    recurrence rather than a nearly-silent model.
    """
    from mambalm.model import init_params

    rng = np.random.default_rng(seed + 7919)
    params = init_params(config, seed)
    for name, arr in params.items():
        if name.endswith(("A_log", "D")):
            continue
        if name.endswith("dt_bias"):
            dt = rng.uniform(0.05, 1.0, arr.shape)
            params[name] = dt + np.log(-np.expm1(-dt))
            continue
        if name.endswith("norm"):
            params[name] = 1.0 + 0.1 * rng.standard_normal(arr.shape)
        elif arr.ndim == 2:
            if name.endswith("embedding"):
                fan_in = 1
            elif name.endswith("conv_weight"):
                fan_in = arr.shape[1]
            else:
                fan_in = arr.shape[0]
            params[name] = scale * rng.standard_normal(arr.shape) / np.sqrt(fan_in)
        else:
            params[name] = 0.1 * rng.standard_normal(arr.shape)
    return params
