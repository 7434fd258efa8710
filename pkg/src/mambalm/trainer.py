"""Desk-scale training loop: staged sequence-length curriculum under the WSD schedule."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ModelConfig, OptimizerConfig, ScheduleConfig, Stage, TrainerConfig, from_dict,
                     validate_stages)
from .data import Windows, load_corpus, pack_tokens
from .kernels import NonFiniteError
from .model import init_params, loss_and_grads
from .optim import AdamW, batch_size_at, lr_at, noise_temperature

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    params: dict
    opt: AdamW
    t: int = 0
    step: int = 0
    stage_index: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))


@dataclass
class TrainResult:
    state: TrainState
    checkpoints: list
    metrics: list


# ---------------------------------------------------------------- checkpoint glue

def save_train_state(path, state: TrainState, model: ModelConfig, schedule: ScheduleConfig,
                     stages, trainer: TrainerConfig, seed: int) -> None:
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.opt.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.opt.v.items()})
    meta = {
        "model": dataclasses.asdict(model),
        "schedule": dataclasses.asdict(schedule),
        "stages": [dataclasses.asdict(s) for s in stages],
        "trainer": dataclasses.asdict(trainer),
        "seed": seed,
        "t": state.t,
        "step": state.step,
        "stage_index": state.stage_index,
        "adam_step": state.opt.step_index,
        "rng_state": state.rng.bit_generator.state,
    }
    save_checkpoint(path, arrays, meta)


def load_model(path) -> tuple[dict, ModelConfig]:
    """Params and model config from any training checkpoint."""
    arrays, meta = load_checkpoint(path)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    return params, from_dict(ModelConfig, meta["model"], "model")


def _restore(path, model: ModelConfig, opt_cfg: OptimizerConfig) -> TrainState:
    arrays, meta = load_checkpoint(path)
    if meta["model"] != dataclasses.asdict(model):
        raise ValueError(f"{path}: checkpoint model config differs from the requested one")
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = AdamW(params, opt_cfg)
    opt.m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    opt.v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    opt.step_index = meta["adam_step"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(params=params, opt=opt, t=meta["t"], step=meta["step"],
                      stage_index=meta["stage_index"], rng=rng)


# ---------------------------------------------------------------- batching

class BatchSampler:
    """Draws training windows per stage: shard by mixture weight, then a uniform window."""

    def __init__(self, shards: dict, separator_id: int = 0):
        self.shards = shards
        self.separator_id = separator_id
        self._windows: dict = {}

    def windows(self, shard: str, seq_len: int) -> Windows:
        key = (shard, seq_len)
        if key not in self._windows:
            self._windows[key] = pack_tokens(self.shards[shard], seq_len, self.separator_id)
        return self._windows[key]

    def weights(self, stage: Stage):
        names = sorted(self.shards)
        if stage.mixture:
            unknown = set(stage.mixture) - set(names)
            if unknown:
                raise ValueError(f"stage {stage.name}: mixture names unknown shards {sorted(unknown)}")
            w = np.array([stage.mixture.get(n, 0.0) for n in names])
        else:
            w = np.array([float(len(self.windows(n, stage.seq_len))) for n in names])
        usable = np.array([len(self.windows(n, stage.seq_len)) > 0 for n in names])
        w = np.where(usable, w, 0.0)
        if w.sum() <= 0:
            raise ValueError(f"stage {stage.name}: corpus too small for seq_len {stage.seq_len}")
        return names, w / w.sum()

    def sample(self, rng: np.random.Generator, stage: Stage, batch: int):
        names, probs = self.weights(stage)
        picks = rng.choice(len(names), size=batch, p=probs)
        rows_t, rows_y, rows_m = [], [], []
        for j in picks:
            win = self.windows(names[j], stage.seq_len)
            i = int(rng.integers(len(win)))
            rows_t.append(win.tokens[i])
            rows_y.append(win.targets[i])
            rows_m.append(win.loss_mask[i])
        return np.stack(rows_t), np.stack(rows_y), np.stack(rows_m)


# ---------------------------------------------------------------- loop

def _stage_file(i: int, stage: Stage) -> str:
    return f"stage{i}-{stage.name}.ckpt"


def train(model_config: ModelConfig, stages, schedule: ScheduleConfig, corpus_path, out_dir,
          seed: int = 0, trainer: TrainerConfig | None = None, resume_from=None) -> TrainResult:
    """Run every stage to its token budget, logging one JSON line per step.

    Checkpoints land in ``out_dir`` at each stage boundary (``pre-decay.ckpt``
    before a decay stage), every ``checkpoint_every`` steps if set, and at the end
    (``final.ckpt``). ``resume_from`` continues a run from any of them.
    """
    trainer = trainer or TrainerConfig()
    stages = validate_stages(list(stages), schedule.t_total)
    schedule.validate()
    model_config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        shards = load_corpus(corpus_path)
    except OSError as exc:
        raise OSError(f"cannot read corpus {corpus_path}: {exc}") from exc
    sampler = BatchSampler(shards, trainer.separator_id)

    if resume_from is not None:
        state = _restore(resume_from, model_config, trainer.optimizer)
    else:
        params = init_params(model_config, seed)
        state = TrainState(params=params, opt=AdamW(params, trainer.optimizer), rng=np.random.default_rng(seed))

    metrics_path = out_dir / METRICS_FILE
    kept = []
    if resume_from is not None and metrics_path.exists():
        kept = [ln for ln in metrics_path.read_text().splitlines() if json.loads(ln)["t"] < state.t]
    metrics = [json.loads(ln) for ln in kept]
    bounds = np.cumsum([s.tokens for s in stages]).tolist()
    checkpoints = []

    def checkpoint(name):
        path = out_dir / name
        save_train_state(path, state, model_config, schedule, stages, trainer, seed)
        checkpoints.append(path)
        log.info("checkpoint %s at t=%d step=%d", path, state.t, state.step)

    with open(metrics_path, "w", encoding="utf-8") as fh:
        for ln in kept:
            fh.write(ln + "\n")
        while state.stage_index < len(stages):
            stage = stages[state.stage_index]
            if state.t >= bounds[state.stage_index]:
                state.stage_index += 1
                fh.flush()
                checkpoint(_stage_file(state.stage_index - 1, stage))
                if state.stage_index < len(stages) and stages[state.stage_index].decay:
                    checkpoint("pre-decay.ckpt")
                continue
            b = batch_size_at(state.t, schedule)
            lr = lr_at(min(state.t, schedule.t_total), schedule)
            tokens, targets, mask = sampler.sample(state.rng, stage, b)
            where = f"step {state.step} (t={state.t}, stage {stage.name})"
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grads = loss_and_grads(state.params, tokens, targets, mask, config=model_config,
                                                  z_coeff=trainer.z_coeff)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"non-finite activations at {where}: {exc}") from exc
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at {where}")
            state.opt.step(state.params, grads, lr)
            row = {"t": state.t, "stage": stage.name, "lr": lr, "batch": b, "loss": value,
                   "noise_temp": noise_temperature(lr, b)}
            fh.write(json.dumps(row) + "\n")
            metrics.append(row)
            state.t += b * stage.seq_len
            state.step += 1
            if trainer.checkpoint_every and state.step % trainer.checkpoint_every == 0:
                fh.flush()
                checkpoint(f"step{state.step}.ckpt")
    checkpoint("final.ckpt")
    return TrainResult(state=state, checkpoints=checkpoints, metrics=metrics)


def read_metrics(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
