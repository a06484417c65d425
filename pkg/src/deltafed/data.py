"""Corpus ingestion and the IID round-robin partition."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ArgumentError
from .model import SEED_PARTITION, Vocab


def load_corpus(path: str | Path) -> bytes:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ArgumentError(f"corpus {path} is too small ({len(data)} bytes)")
    return data


def split_stream(ids: list[int], split: float) -> tuple[list[int], list[int]]:
    """Front fraction for training, remainder for evaluation."""
    if not 0.0 < split < 1.0:
        raise ArgumentError(f"split must be in (0, 1), got {split}")
    cut = int(len(ids) * split)
    train, val = list(ids[:cut]), list(ids[cut:])
    if len(train) < 2 or len(val) < 2:
        raise ArgumentError(
            f"split {split} leaves too few tokens ({len(train)}/{len(val)})"
        )
    return train, val


def sequences_of(ids: list[int], context: int) -> list[list[int]]:
    """Non-overlapping windows of context+1 tokens; tails under 2 are dropped."""
    if context < 1:
        raise ArgumentError(f"context must be >= 1, got {context}")
    out = []
    for start in range(0, len(ids), context + 1):
        window = list(ids[start : start + context + 1])
        if len(window) >= 2:
            out.append(window)
    return out


def partition_iid(
    sequences: list[list[int]], k: int, seed: int
) -> list[list[list[int]]]:
    """Seeded shuffle, then round-robin: shard i takes positions i, i+k, ..."""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if len(sequences) < k:
        raise ArgumentError(
            f"cannot split {len(sequences)} sequences across {k} clients"
        )
    rng = np.random.default_rng([seed, SEED_PARTITION])
    order = rng.permutation(len(sequences))
    return [[sequences[j] for j in order[i::k]] for i in range(k)]


def corpus_tokens(path: str | Path) -> tuple[Vocab, list[int]]:
    data = load_corpus(path)
    vocab = Vocab.from_corpus(data)
    return vocab, vocab.encode(data)
