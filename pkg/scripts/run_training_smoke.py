"""Desk-scale training smoke run: full curriculum, then a resume from the pre-decay checkpoint.

Prints the initial and final loss, their ratio, and whether the resumed run
reproduced the uninterrupted metrics log byte for byte.
"""

import argparse
import math
import time
from pathlib import Path

from mambalm.config import load_run_config
from mambalm.data import build_docstring_corpus
from mambalm.trainer import read_metrics, train

ROOT = Path(__file__).resolve().parents[1]


def smoke(config_path, out_dir, corpus_bytes=1_000_000, seed=0, tail=20, resume=True):
    cfg = load_run_config(config_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = out_dir / "corpus.txt"
    if not corpus.exists():
        corpus.write_text(build_docstring_corpus(corpus_bytes), encoding="utf-8")
    t0 = time.perf_counter()
    res = train(cfg.model, cfg.stages, cfg.schedule, corpus, out_dir / "full", seed=seed, trainer=cfg.trainer)
    elapsed = time.perf_counter() - t0
    losses = [r["loss"] for r in res.metrics]
    report = {
        "steps": len(losses),
        "seconds": elapsed,
        "initial_loss": losses[0],
        "ln_vocab": math.log(cfg.model.vocab_size),
        "final_loss": sum(losses[-tail:]) / len(losses[-tail:]),
    }
    report["ratio"] = report["final_loss"] / report["initial_loss"]
    if resume:
        t0 = time.perf_counter()
        train(cfg.model, cfg.stages, cfg.schedule, corpus, out_dir / "resumed", seed=seed, trainer=cfg.trainer,
              resume_from=out_dir / "full" / "pre-decay.ckpt")
        full = (out_dir / "full" / "metrics.jsonl").read_bytes()
        resumed = (out_dir / "resumed" / "metrics.jsonl").read_bytes()
        report["resume_seconds"] = time.perf_counter() - t0
        report["resumed_lines"] = len(read_metrics(out_dir / "resumed" / "metrics.jsonl"))
        report["resume_identical"] = len(resumed) > 0 and full.endswith(resumed)
    return report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.json")
    ap.add_argument("--out", type=Path, default=Path("runs/smoke"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for k, v in smoke(args.config, args.out, seed=args.seed).items():
        print(f"{k}: {v}")


if __name__ == "__main__":
    main()
