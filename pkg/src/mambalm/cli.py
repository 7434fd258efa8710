"""Command-line entry point: train, generate, bench, schedule.

Exit status is 0 on success, 1 when flags, configs or inputs fail validation
and 2 when the work itself fails. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_run_config

log = logging.getLogger("mambalm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return value


def _non_negative_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"expected a number >= 0, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mambalm", description="Byte-level Mamba language model: train, generate, benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model over a staged curriculum",
                       description="Train a model from a run config over a text corpus.")
    p.add_argument("--config", required=True, type=Path, help="run config (JSON)")
    p.add_argument("--corpus", required=True, type=Path, help="UTF-8 text file, or a directory of *.txt shards")
    p.add_argument("--out", required=True, type=Path, help="output directory for checkpoints and metrics.jsonl")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    p = sub.add_parser("generate", help="continue prompts from a checkpoint",
                       description="Generate continuations, one JSON string per prompt on stdout.")
    p.add_argument("--checkpoint", required=True, type=Path, help="training checkpoint")
    p.add_argument("--prompts", required=True, type=Path, help="UTF-8 text file, one prompt per line")
    p.add_argument("--max-new", required=True, type=_positive_int, help="tokens to generate per prompt")
    p.add_argument("--temperature", type=_non_negative_float, default=0.0,
                   help="sampling temperature; 0 means greedy (default: 0)")
    p.add_argument("--prefill", choices=("parallel", "sequential"), default="parallel",
                   help="prompt processing mode (default: parallel)")
    p.add_argument("--chunk", type=_positive_int, default=64, help="chunk size for sequential prefill (default: 64)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default: 0)")
    p.add_argument("--stop", type=int, action="append", default=[], metavar="ID",
                   help="token id that ends a row; may repeat")

    p = sub.add_parser("bench", help="decode throughput and state memory vs. position",
                       description="Benchmark greedy decoding from a one-token prompt.")
    p.add_argument("--model", required=True, choices=("mamba", "attention"), help="model to benchmark")
    p.add_argument("--tokens", required=True, type=_positive_int, help="tokens to generate")
    p.add_argument("--record-every", required=True, type=_positive_int, help="positions between records")
    p.add_argument("--out", required=True, type=Path, help="report path")
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="report format (default: csv)")
    p.add_argument("--repetitions", type=_positive_int, default=None,
                   help="timed passes, median taken (default: from config, else 3)")
    p.add_argument("--config", type=Path, default=None, help="run config supplying model and bench sections")
    p.add_argument("--seed", type=int, default=0, help="parameter seed (default: 0)")

    p = sub.add_parser("schedule", help="write the learning-rate and batch-size trace",
                       description="Write the (t, lr, batch, noise_temp) schedule trace as CSV.")
    p.add_argument("--config", required=True, type=Path, help="run config (JSON); only the schedule section is used")
    p.add_argument("--out", required=True, type=Path, help="CSV output path")
    p.add_argument("--points", type=_positive_int, default=200, help="evenly spaced samples (default: 200)")
    return parser


# ---------------------------------------------------------------- commands
# Each command validates its inputs and returns a zero-argument callable doing the work.

def _cmd_train(args):
    from .trainer import train

    cfg = load_run_config(args.config)
    if not cfg.stages:
        raise ConfigError(f"{args.config}: stages: at least one stage required for training")
    if not args.corpus.exists():
        raise ConfigError(f"corpus not found: {args.corpus}")

    def run():
        res = train(cfg.model, cfg.stages, cfg.schedule, args.corpus, args.out, seed=args.seed,
                    trainer=cfg.trainer, resume_from=args.resume)
        last = res.metrics[-1] if res.metrics else {}
        print(f"trained {res.state.step} steps, {res.state.t} tokens, final loss {last.get('loss', float('nan')):.4f}",
              file=sys.stderr)
    return run


def _cmd_generate(args):
    from .data import detokenize, tokenize_bytes
    from .inference import generate
    from .trainer import load_model

    try:
        lines = args.prompts.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read prompts {args.prompts}: {exc}") from None
    prompts = [tokenize_bytes(ln) for ln in lines]
    if not prompts or any(not p for p in prompts):
        raise ConfigError(f"{args.prompts}: need at least one prompt and no empty lines")
    if not args.checkpoint.exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")

    def run():
        params, model_cfg = load_model(args.checkpoint)
        outs = generate(params, prompts, args.max_new, config=model_cfg, temperature=args.temperature,
                        seed=args.seed, stop_ids=args.stop, prefill_mode=args.prefill, chunk=args.chunk)
        for ids in outs:
            print(json.dumps(detokenize(ids, model_cfg.vocab_size, errors="replace")))
    return run


def _cmd_bench(args):
    from .bench import emit_report, run_generation_bench
    from .config import RunConfig

    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.tokens < args.record_every:
        raise ConfigError("--tokens must be >= --record-every")
    reps = args.repetitions or cfg.bench.repetitions

    def run():
        records = run_generation_bench(args.model, args.tokens, args.record_every, reps, model_config=cfg.model,
                                       attention_config=cfg.bench.attention, seed=args.seed,
                                       warmup_steps=cfg.bench.warmup_steps)
        emit_report(records, args.out, args.format)
    return run


def _cmd_schedule(args):
    from .optim import schedule_trace

    cfg = load_run_config(args.config).schedule

    def run():
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "lr", "batch", "noise_temp"])
            for s in schedule_trace(cfg, args.points):
                w.writerow([repr(float(s.t)), repr(s.lr), s.batch, repr(s.noise_temp)])
    return run


COMMANDS = {"train": _cmd_train, "generate": _cmd_generate, "bench": _cmd_bench, "schedule": _cmd_schedule}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = COMMANDS[args.command](args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"mambalm {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    try:
        run()
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"mambalm {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
