"""Evaluation metrics and run reports: BLEU, perplexity, CSV/JSON emission."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import ArgumentError
from .model import LmModel, perplexity_of

MODES = ("federated", "central", "local")

CSV_COLUMNS = (
    "round",
    "mode",
    "train_loss",
    "perplexity",
    "wall_ms",
    "uplink_bytes",
    "downlink_bytes",
)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hypothesis: Sequence,
    references: list,
    max_n: int = 4,
    smoothing: str | None = None,
) -> float:
    """Clipped n-gram precision score with brevity penalty, in [0, 1].

    Geometric mean of p_1..p_max_n over the orders the hypothesis is long
    enough to populate, so a 2-token hypothesis is scored on orders 1-2 and
    bleu(h, [h]) is 1.0 for every non-empty h. Without smoothing any zero
    precision zeroes the score; smoothing="add_one" laplace-smooths orders
    n >= 2.
    """
    if max_n < 1:
        raise ArgumentError(f"max_n must be >= 1, got {max_n}")
    if not references:
        raise ArgumentError("references must be non-empty")
    if smoothing not in (None, "add_one"):
        raise ArgumentError(f"unknown smoothing {smoothing!r}")
    hyp = list(hypothesis)
    if not hyp:
        return 0.0

    log_sum = 0.0
    orders = 0
    for n in range(1, max_n + 1):
        hyp_grams = _ngrams(hyp, n)
        total = sum(hyp_grams.values())
        if total == 0:
            break  # hypothesis too short for this and higher orders
        best = Counter()
        for ref in references:
            for gram, cnt in _ngrams(list(ref), n).items():
                if cnt > best[gram]:
                    best[gram] = cnt
        clipped = sum(min(cnt, best[gram]) for gram, cnt in hyp_grams.items())
        if smoothing == "add_one" and n >= 2:
            p = (clipped + 1) / (total + 1)
        else:
            if clipped == 0:
                return 0.0
            p = clipped / total
        log_sum += math.log(p)
        orders += 1

    c = len(hyp)
    ref_lens = sorted(len(r) for r in references)
    r = min(ref_lens, key=lambda L: (abs(L - c), L))  # ties -> shorter
    bp = min(1.0, math.exp(1.0 - r / c))
    return bp * math.exp(log_sum / orders)


def corpus_perplexity(
    model: LmModel, ids: Sequence[int], context: int | None = None
) -> float:
    return perplexity_of(model, ids, context)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    mode: str
    train_loss: float
    perplexity: float | None
    wall_ms: int
    uplink_bytes: int
    downlink_bytes: int

    def __post_init__(self) -> None:
        if self.round < 0:
            raise ArgumentError(f"round must be >= 0, got {self.round}")
        if self.mode not in MODES:
            raise ArgumentError(f"unknown mode {self.mode!r}")
        if self.train_loss < 0:  # nan passes: eval-only records carry nan
            raise ArgumentError(f"train_loss must be >= 0, got {self.train_loss}")
        if self.perplexity is not None and self.perplexity < 1.0:
            raise ArgumentError(
                f"perplexity must be >= 1, got {self.perplexity}"
            )
        if self.wall_ms < 0:
            raise ArgumentError(f"wall_ms must be >= 0, got {self.wall_ms}")
        if self.uplink_bytes < 0 or self.downlink_bytes < 0:
            raise ArgumentError("byte counts must be >= 0")


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.9g}"


def format_rows(records: list[RoundRecord]) -> list[str]:
    rows = [",".join(CSV_COLUMNS)]
    for rec in records:
        rows.append(
            f"{rec.round},{rec.mode},{_fmt(rec.train_loss)},"
            f"{_fmt(rec.perplexity)},{rec.wall_ms},{rec.uplink_bytes},"
            f"{rec.downlink_bytes}"
        )
    return rows


def parse_rounds_csv(text: str) -> list[RoundRecord]:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ArgumentError("unrecognized rounds csv header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(CSV_COLUMNS):
            raise ArgumentError(f"malformed csv row: {ln!r}")
        out.append(
            RoundRecord(
                round=int(parts[0]),
                mode=parts[1],
                train_loss=float(parts[2]),
                perplexity=None if parts[3] == "" else float(parts[3]),
                wall_ms=int(parts[4]),
                uplink_bytes=int(parts[5]),
                downlink_bytes=int(parts[6]),
            )
        )
    return out


def _check_contiguous(records: list[RoundRecord]) -> None:
    by_mode: dict[str, list[int]] = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(rec.round)
    for mode, rounds in by_mode.items():
        expect = list(range(rounds[0], rounds[0] + len(rounds)))
        if rounds != expect:
            raise ArgumentError(
                f"rounds for mode {mode!r} are not contiguous: {rounds}"
            )


def emit_report(
    records: list[RoundRecord],
    out_dir: str | Path,
    summary_extra: dict | None = None,
) -> tuple[Path, Path]:
    """Write rounds.csv and summary.json; -> (csv_path, json_path)."""
    if not records:
        raise ArgumentError("no records to report")
    _check_contiguous(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "rounds.csv"
    csv_path.write_text("\n".join(format_rows(records)) + "\n")

    modes: dict[str, dict] = {}
    for rec in records:
        slot = modes.setdefault(
            rec.mode,
            {
                "rounds": 0,
                "final_train_loss": None,
                "final_perplexity": None,
                "total_uplink_bytes": 0,
                "total_downlink_bytes": 0,
                "total_wall_ms": 0,
            },
        )
        slot["rounds"] += 1
        # json has no nan literal; eval-only records surface as null
        slot["final_train_loss"] = (
            None if math.isnan(rec.train_loss) else rec.train_loss
        )
        if rec.perplexity is not None:
            slot["final_perplexity"] = rec.perplexity
        slot["total_uplink_bytes"] += rec.uplink_bytes
        slot["total_downlink_bytes"] += rec.downlink_bytes
        slot["total_wall_ms"] += rec.wall_ms

    summary = {"modes": modes}
    if summary_extra:
        overlap = set(summary_extra) & set(summary)
        if overlap:
            raise ArgumentError(f"summary_extra collides on {sorted(overlap)}")
        summary.update(summary_extra)
    json_path = out / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
