"""Write the deterministic ~1 MB docstring corpus used by the smoke run."""

import argparse
from pathlib import Path

from mambalm.data import build_docstring_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/corpus.txt"))
    ap.add_argument("--bytes", type=int, default=1_000_000)
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    text = build_docstring_corpus(args.bytes)
    args.out.write_text(text, encoding="utf-8")
    print(f"wrote {len(text.encode('utf-8'))} bytes to {args.out}")


if __name__ == "__main__":
    main()
