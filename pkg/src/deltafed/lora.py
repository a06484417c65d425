"""Low-rank adapters over 2-D model entries.

attach() freezes the whole base model and adds trainable factor pairs
A (m x r, gaussian init) and B (r x n, zero init) per target, so a freshly
adapted model computes exactly what the plain one did (A @ B == 0). The
effective weight is base + scaling * A @ B with scaling = alpha/r, or 1.0
when literal scaling is requested. merge() folds the factors back into the
base entries and returns an all-trainable plain model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError
from .model import SEED_LORA, LmModel
from .params import ParameterSet, Tensor

LORA_INIT_STD = 0.02


@dataclass(frozen=True)
class LoraAdapter:
    target: str
    rank: int
    alpha: float
    dropout_p: float
    scaling: float

    def __post_init__(self):
        if self.rank < 1:
            raise ArgumentError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ArgumentError(f"dropout must be in [0, 1), got {self.dropout_p}")


def attach(
    model: LmModel,
    targets: Sequence[str],
    rank: int,
    alpha: float,
    dropout_p: float = 0.0,
    seed: int = 0,
    literal_scaling: bool = False,
) -> LmModel:
    """Adapted copy of model: base frozen, factor entries added trainable.

    Freezing covers every pre-existing entry, not just the targets; after
    attach, only the ".lora.A"/".lora.B" entries train, so round deltas
    carry nothing else.
    """
    if model.adapters:
        raise ArgumentError("adapters already attached")
    names = list(dict.fromkeys(targets))
    if not names:
        raise ArgumentError("need at least one adapter target")
    p = model.params
    for t in names:
        if t not in p:
            raise ArgumentError(f"no entry named {t!r}")
        shape = p.tensor(t).shape
        if len(shape) != 2:
            raise ArgumentError(f"adapter target {t!r} must be 2-D, got shape {shape}")
        if rank > min(shape):
            raise ArgumentError(
                f"rank {rank} exceeds min dim of {t!r} {min(shape)}"
            )

    scaling = 1.0 if literal_scaling else alpha / rank
    rng = np.random.default_rng([seed, SEED_LORA])
    frozen = p.with_flags({n: False for n in p.names()})
    extras = []
    meta = {}
    for t in sorted(names):
        m, n = p.tensor(t).shape
        a = rng.normal(0.0, LORA_INIT_STD, (m, rank))
        extras.append((f"{t}.lora.A", Tensor.from_array(a), True))
        extras.append((f"{t}.lora.B", Tensor.from_array(np.zeros((rank, n))), True))
        meta[t] = LoraAdapter(t, rank, float(alpha), float(dropout_p), float(scaling))
    adapted = frozen.merged_with(ParameterSet(extras))
    return LmModel(model.cfg, adapted, meta)


def effective_weight(model: LmModel, target: str) -> np.ndarray:
    """base + scaling * A @ B for one adapted target."""
    ad = model.adapters.get(target)
    if ad is None:
        raise ArgumentError(f"no adapter on {target!r}")
    p = model.params
    return p.array(target) + ad.scaling * (
        p.array(f"{target}.lora.A") @ p.array(f"{target}.lora.B")
    )


def merge(model: LmModel) -> LmModel:
    """Fold adapters into their targets; plain all-trainable model."""
    if not model.adapters:
        raise ArgumentError("no adapters present")
    merged_values = {t: effective_weight(model, t) for t in model.adapters}
    factor_names = [
        f"{t}.lora.{s}" for t in model.adapters for s in ("A", "B")
    ]
    p = model.params.drop(factor_names)
    p = p.replace_values(merged_values)
    p = p.with_flags({n: True for n in p.names()})
    return LmModel(model.cfg, p, {})
