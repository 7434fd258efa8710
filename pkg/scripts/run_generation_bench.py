"""Decode throughput and state memory for Mamba and the KV-cache baseline.

Writes one CSV per model plus a prefill memory sweep, and prints the fitted
memory slopes and the Mamba last/first per-token time ratio.
"""

import argparse
from pathlib import Path

from mambalm.bench import emit_report, fit_memory_slope, run_generation_bench, run_prefill_bench, time_flatness


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", type=int, default=10_000)
    ap.add_argument("--record-every", type=int, default=1000)
    ap.add_argument("--repetitions", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    for tag in ("mamba", "attention"):
        recs = run_generation_bench(tag, args.tokens, args.record_every, args.repetitions)
        emit_report(recs, args.out / f"decode_{tag}.csv")
        fit = fit_memory_slope(recs)
        print(f"{tag}: state bytes/token slope {fit['slope']:.1f} (R^2 {fit['r2']:.6f}), "
              f"per-token time last/first {time_flatness(recs):.3f}")
        for r in recs:
            print(f"  pos {r.position:>7d}  {r.sec_per_token * 1e6:8.1f} us/token  state {r.state_bytes:>10d} B")

    lengths = [64, 256, 1024, 4096]
    par = run_prefill_bench(lengths, mode="parallel")
    seq = run_prefill_bench(lengths, mode="sequential", chunk=64)
    emit_report(par + seq, args.out / "prefill.csv")
    print("prefill peak transient bytes (parallel vs sequential chunk 64):")
    for p, s in zip(par, seq):
        print(f"  T={p.position:>5d}  {p.peak_transient_bytes:>12d}  {s.peak_transient_bytes:>10d}")


if __name__ == "__main__":
    main()
