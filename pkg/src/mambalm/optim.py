"""AdamW and the token-indexed training schedule.

The learning rate follows warmup-stable-decay with an exponential decay profile;
the batch size ramps up linearly. With batch scaling on, the learning rate is
rescaled by sqrt(b / b_max) so the Adam noise temperature lr / sqrt(b) stays
fixed while the batch grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import OptimizerConfig, ScheduleConfig
from .model import decays


def noise_temperature(eta: float, b: int) -> float:
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    return eta / math.sqrt(b)


def batch_size_at(t: float, cfg: ScheduleConfig) -> int:
    if t < 0:
        raise ValueError("t must be non-negative")
    if cfg.t_rampup <= 0 or t >= cfg.t_rampup:
        b = float(cfg.b_max)
    else:
        b = cfg.b_min + (cfg.b_max - cfg.b_min) * (t / cfg.t_rampup)
    g = cfg.batch_granularity
    return max(cfg.b_min, int(math.floor(b / g)) * g)


def _eta_base(t: float, cfg: ScheduleConfig) -> float:
    if not cfg.batch_scaling:
        return cfg.eta_max
    return cfg.eta_max * math.sqrt(batch_size_at(t, cfg) / cfg.b_max)


def lr_at(t: float, cfg: ScheduleConfig) -> float:
    if not 0 <= t <= cfg.t_total:
        raise ValueError(f"t={t} outside [0, {cfg.t_total}]")
    stable_end = cfg.stable_end
    if t < cfg.t_warmup:
        return _eta_base(t, cfg) * (t / cfg.t_warmup)
    if t <= stable_end:
        return _eta_base(t, cfg)
    tau = t - stable_end
    return _eta_base(stable_end, cfg) * math.exp(-(tau / cfg.t_decay) * math.log(1.0 / cfg.eta_min_ratio))


@dataclass(frozen=True)
class ScheduleState:
    t: float
    lr: float
    batch: int
    noise_temp: float


def schedule_state(t: float, cfg: ScheduleConfig) -> ScheduleState:
    lr = lr_at(t, cfg)
    b = batch_size_at(t, cfg)
    return ScheduleState(t=t, lr=lr, batch=b, noise_temp=noise_temperature(lr, b))


def schedule_trace(cfg: ScheduleConfig, n_points: int = 200) -> list[ScheduleState]:
    """Evenly spaced samples over [0, t_total] plus every phase boundary."""
    cfg.validate()
    ts = set(np.linspace(0.0, cfg.t_total, n_points).tolist())
    ts.update({0.0, float(cfg.t_warmup), float(cfg.stable_end), float(cfg.t_total)})
    if 0 < cfg.t_rampup < cfg.t_total:
        ts.add(float(cfg.t_rampup))
    return [schedule_state(t, cfg) for t in sorted(ts)]


# ---------------------------------------------------------------- AdamW

class AdamW:
    """Decoupled AdamW over a dict of named arrays.

    Norm gains, biases, ``A_log`` and ``D`` are exempt from weight decay.
    """

    def __init__(self, params: dict, cfg: OptimizerConfig | None = None):
        self.cfg = (cfg or OptimizerConfig()).validate()
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_index = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_index += 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
            params[name], self.m[name], self.v[name] = adamw_step(
                p, g, self.m[name], self.v[name], self.step_index, lr, self.cfg, decay=decays(name))


def adamw_step(p, g, m, v, step_index: int, lr: float, cfg: OptimizerConfig, decay: bool = True):
    """One AdamW update. Returns (p', m', v')."""
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    if not (np.shape(p) == np.shape(g) == np.shape(m) == np.shape(v)):
        raise ValueError("adamw_step: shape mismatch")
    m = cfg.beta1 * m + (1 - cfg.beta1) * g
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
    m_hat = m / (1 - cfg.beta1**step_index)
    v_hat = v / (1 - cfg.beta2**step_index)
    update = m_hat / (np.sqrt(v_hat) + cfg.eps)
    if decay:
        update = update + cfg.weight_decay * p
    return p - lr * update, m, v
