"""Shared test helpers: finite-difference oracles and synthetic corpora."""

from __future__ import annotations

import numpy as np
import pytest


def fd_gradient(f, arr: np.ndarray, h: float = 1e-5, sample: int | None = None,
                rng: np.random.Generator | None = None):
    """Central-difference gradient of scalar f() w.r.t. entries of arr.

    Perturbs arr in place (restoring it) so f can close over the live array.
    Returns a list of (flat_index, derivative); when `sample` is given only
    that many randomly chosen coordinates are probed.
    """
    flat = arr.reshape(-1)
    if sample is not None and flat.size > sample:
        idxs = rng.choice(flat.size, size=sample, replace=False)
    else:
        idxs = np.arange(flat.size)
    out = []
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.append((int(i), (fp - fm) / (2.0 * h)))
    return out


def rel_err(a: float, b: float, floor: float = 1e-4) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def max_grad_rel_err(analytic: np.ndarray, f, arr: np.ndarray, h: float = 1e-5,
                     sample: int | None = None, rng=None, floor: float = 1e-4) -> float:
    """Worst relative error between analytic grad and central differences."""
    worst = 0.0
    flat = analytic.reshape(-1)
    for i, numeric in fd_gradient(f, arr, h=h, sample=sample, rng=rng):
        worst = max(worst, rel_err(float(flat[i]), numeric, floor=floor))
    return worst


def synthetic_corpus(n_lines: int, seed: int, vocab_words: int = 400) -> list[str]:
    """Word corpus with Zipf unigrams and strong bigram tendencies.

    Each word has three preferred successors, so masked prediction has real
    structure to learn and specific pairs for a memory to latch onto.
    """
    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(vocab_words)]
    succ = rng.integers(0, vocab_words, size=(vocab_words, 3))
    lines = []
    for _ in range(n_lines):
        length = int(rng.integers(8, 20))
        cur = int(rng.zipf(1.5)) % vocab_words
        toks = [words[cur]]
        for _ in range(length - 1):
            if rng.random() < 0.8:
                cur = int(succ[cur, rng.integers(0, 3)])
            else:
                cur = int(rng.zipf(1.5)) % vocab_words
            toks.append(words[cur])
        lines.append(" ".join(toks))
    return lines


def separable_task(n_examples: int, seed: int, filler_words: int = 40):
    """Binary task where class c sentences always contain marker token mk{c}."""
    rng = np.random.default_rng(seed)
    texts, labels = [], []
    for _ in range(n_examples):
        label = int(rng.integers(0, 2))
        length = int(rng.integers(5, 12))
        toks = [f"f{int(w):02d}" for w in rng.integers(0, filler_words, size=length)]
        toks.insert(int(rng.integers(0, len(toks) + 1)), f"mk{label}")
        texts.append(" ".join(toks))
        labels.append(label)
    return texts, labels


@pytest.fixture(scope="session")
def smoke_corpus() -> list[str]:
    return synthetic_corpus(600, seed=7)
