"""Regenerate the bundled training corpus.

The text is synthetic on purpose: a tiny phrase grammar over a small word
list keeps the byte vocabulary under two dozen symbols, so the toy model can
make real progress in a handful of rounds. Run from the repository root:

    python3 scripts/make_corpus.py
"""

from pathlib import Path

import numpy as np

SEED = 7
TARGET_BYTES = 140_000

SUBJECTS = ["the cat", "a dog", "the bird", "one fish", "the fox", "a hen"]
VERBS = ["sees", "finds", "likes", "seeks", "bothers", "follows"]
OBJECTS = ["the sun", "a stone", "the rain", "one tree", "the nest", "a leaf"]
TAILS = ["at dawn", "at dusk", "in the den", "near the pond", "by the hill"]


def sentence(rng):
    parts = [
        SUBJECTS[rng.integers(len(SUBJECTS))],
        VERBS[rng.integers(len(VERBS))],
        OBJECTS[rng.integers(len(OBJECTS))],
    ]
    if rng.random() < 0.5:
        parts.append(TAILS[rng.integers(len(TAILS))])
    return " ".join(parts) + ".\n"


def make_corpus(target=TARGET_BYTES, seed=SEED):
    rng = np.random.default_rng(seed)
    chunks = []
    total = 0
    while total < target:
        s = sentence(rng)
        chunks.append(s)
        total += len(s)
    return "".join(chunks)


def main():
    out = Path(__file__).resolve().parent.parent / "src" / "deltafed" / "assets" / "corpus.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    text = make_corpus()
    out.write_text(text, encoding="ascii")
    print(f"wrote {len(text)} bytes, {len(set(text))} distinct symbols -> {out}")


if __name__ == "__main__":
    main()
