"""Corpus ingestion: vocabulary building, tokenization, batching.

A corpus is UTF-8 text, one document per line. The vocabulary is frequency
ranked (ties broken lexicographically) under four fixed reserved ids, so a
rebuild from the same corpus is byte-identical. Pretraining packs the token
stream into fixed-length blocks, each starting with [CLS]; classification
examples are [CLS] + text, padded with [PAD] and carried with an attention
mask.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import CLS_ID, NUM_RESERVED, PAD_ID

RESERVED_TOKENS = ("[PAD]", "[MASK]", "[UNK]", "[CLS]")


@dataclass
class Vocab:
    id_to_token: list[str]

    def __post_init__(self):
        if tuple(self.id_to_token[:NUM_RESERVED]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, pieces: list[str]) -> list[int]:
        unk = self.token_to_id["[UNK]"]
        return [self.token_to_id.get(p, unk) for p in pieces]


def split_line(line: str, mode: str) -> list[str]:
    if mode == "word":
        return line.split()
    if mode == "char":
        return list(line.rstrip("\n"))
    raise ValueError(f"unknown tokenizer mode {mode!r}")


def build_vocab(lines, mode: str = "word", max_size: int = 8192) -> Vocab:
    """Frequency-ranked vocabulary; deterministic for a fixed corpus."""
    if max_size <= NUM_RESERVED:
        raise ValueError(f"max_size must exceed {NUM_RESERVED}")
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(split_line(line, mode))
    if not counts:
        raise ValueError("empty corpus: no tokens found")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    keep = [tok for tok, _ in ranked[: max_size - NUM_RESERVED]]
    return Vocab(list(RESERVED_TOKENS) + keep)


def save_vocab(vocab: Vocab, path) -> None:
    Path(path).write_text("\n".join(vocab.id_to_token) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    text = Path(path).read_text(encoding="utf-8")
    tokens = text.split("\n")
    if tokens and tokens[-1] == "":
        tokens.pop()
    return Vocab(tokens)


def read_corpus(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line.strip()]


def split_held_out(lines: list[str], fraction: float) -> tuple[list[str], list[str]]:
    """Deterministic tail split: last `fraction` of lines become the eval set."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("held-out fraction must be in (0, 1)")
    n_eval = max(1, int(round(len(lines) * fraction)))
    if n_eval >= len(lines):
        raise ValueError("corpus too small for the requested held-out split")
    return lines[:-n_eval], lines[-n_eval:]


def corpus_blocks(lines: list[str], vocab: Vocab, mode: str, seq_len: int) -> np.ndarray:
    """Pack the corpus token stream into (n, seq_len) blocks, [CLS] first.

    Blocks hold seq_len - 1 real tokens each; the stream tail that does not
    fill a block is dropped, so blocks contain no padding.
    """
    if seq_len < 2:
        raise ValueError("seq_len must be at least 2")
    stream: list[int] = []
    for line in lines:
        stream.extend(vocab.encode(split_line(line, mode)))
    body = seq_len - 1
    n_blocks = len(stream) // body
    if n_blocks == 0:
        raise ValueError("corpus too small: not enough tokens for one block")
    arr = np.asarray(stream[: n_blocks * body], dtype=np.int64).reshape(n_blocks, body)
    cls_col = np.full((n_blocks, 1), CLS_ID, dtype=np.int64)
    return np.concatenate([cls_col, arr], axis=1)


def load_labeled_tsv(path) -> tuple[list[str], list[int]]:
    """Rows of `label<TAB>text`; labels must be small non-negative ints."""
    texts: list[str] = []
    labels: list[int] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            label, text = line.split("\t", 1)
            labels.append(int(label))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: expected 'label<TAB>text'") from exc
        texts.append(text)
    if not texts:
        raise ValueError(f"{path}: no labeled examples")
    return texts, labels


def classification_examples(texts: list[str], labels: list[int], vocab: Vocab,
                            mode: str, seq_len: int):
    """Returns (tokens (n, seq_len), labels (n,), pad_mask (n, seq_len) bool)."""
    n = len(texts)
    tokens = np.full((n, seq_len), PAD_ID, dtype=np.int64)
    tokens[:, 0] = CLS_ID
    mask = np.zeros((n, seq_len), dtype=bool)
    mask[:, 0] = True
    for row, text in enumerate(texts):
        ids = vocab.encode(split_line(text, mode))[: seq_len - 1]
        tokens[row, 1 : 1 + len(ids)] = ids
        mask[row, 1 : 1 + len(ids)] = True
    return tokens, np.asarray(labels, dtype=np.int64), mask
