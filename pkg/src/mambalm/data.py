"""Byte-level tokenization, document packing and corpus loading."""

from __future__ import annotations

import ast
import sysconfig
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BYTE_VOCAB = 256


def tokenize_bytes(text: str | bytes) -> list[int]:
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def detokenize(ids, vocab_size: int = BYTE_VOCAB, errors: str = "strict") -> str:
    ids = [int(i) for i in ids]
    bad = [i for i in ids if not 0 <= i < vocab_size]
    if bad:
        raise ValueError(f"token id {bad[0]} outside vocabulary of size {vocab_size}")
    # ids >= 256 are specials with no byte form
    return bytes(i for i in ids if i < BYTE_VOCAB).decode("utf-8", errors=errors)


@dataclass(frozen=True)
class Windows:
    """Packed training windows: inputs, next-token targets and loss mask, each (n, seq_len)."""

    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return self.tokens.shape[0]


def pack_tokens(documents, seq_len: int, separator_id: int = 0) -> Windows:
    """Join documents (each followed by ``separator_id``) and cut contiguous windows.

    Window i covers stream[i*L : (i+1)*L] with targets shifted by one; a tail that
    cannot fill a whole window (plus its final target) is dropped.
    """
    if seq_len < 2:
        raise ValueError("seq_len must be >= 2")
    documents = list(documents)
    if not documents:
        raise ValueError("pack_tokens: no documents")
    pieces = []
    for doc in documents:
        pieces.append(np.asarray(doc, dtype=np.int64))
        pieces.append(np.array([separator_id], dtype=np.int64))
    stream = np.concatenate(pieces)
    n = (len(stream) - 1) // seq_len
    if n <= 0:
        empty = np.zeros((0, seq_len), dtype=np.int64)
        return Windows(empty, empty.copy(), np.zeros((0, seq_len), dtype=bool))
    tokens = stream[: n * seq_len].reshape(n, seq_len)
    targets = stream[1 : n * seq_len + 1].reshape(n, seq_len)
    return Windows(tokens, targets, np.ones((n, seq_len), dtype=bool))


def split_documents(text: str) -> list[str]:
    """Blank-line separated paragraphs; each becomes one packed document."""
    return [p.strip("\n") for p in text.split("\n\n") if p.strip()]


def load_corpus(path: str | Path) -> dict[str, list[list[int]]]:
    """Load a text file or a directory of ``*.txt`` shards as tokenized documents.

    Returns ``{shard_name: documents}``; a single file is the shard ``"main"``.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.txt"))
        named = {f.stem: f for f in files}
    else:
        named = {"main": path}
    if not named:
        raise FileNotFoundError(f"no corpus files under {path}")
    shards = {}
    for name, f in named.items():
        text = f.read_text(encoding="utf-8")
        docs = [tokenize_bytes(d) for d in split_documents(text)]
        if docs:
            shards[name] = docs
    if not shards:
        raise ValueError(f"corpus at {path} is empty")
    return shards


def build_docstring_corpus(n_bytes: int = 1_000_000) -> str:
    """Deterministic English-ish text: docstrings harvested from the standard library.

    Used as the offline training corpus; output depends only on the interpreter's
    stdlib sources.
    """
    root = Path(sysconfig.get_paths()["stdlib"])
    skip = {"site-packages", "dist-packages", "test", "tests", "idle_test"}
    files = sorted(p.relative_to(root) for p in root.rglob("*.py"))
    out, size = [], 0
    for rel in files:
        if skip.intersection(rel.parts[:-1]):
            continue
        f = root / rel
        try:
            tree = ast.parse(f.read_text(encoding="utf-8"))
        except (SyntaxError, UnicodeDecodeError, ValueError):
            continue
        for node in ast.walk(tree):
            if isinstance(node, (ast.Module, ast.ClassDef, ast.FunctionDef, ast.AsyncFunctionDef)):
                doc = ast.get_docstring(node)
                if doc and len(doc) > 40 and doc.isascii():
                    out.append(doc)
                    size += len(doc) + 2
                    if size >= n_bytes:
                        return "\n\n".join(out)[:n_bytes]
    return "\n\n".join(out)
