"""AdamW with decoupled weight decay, global-norm clipping, and linear warmup."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, StructureError
from .model import LmModel, loss_and_grad
from .params import ParameterSet, l2_norm


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    total_steps: int
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.001
    max_grad_norm: float = 0.3
    warmup_ratio: float = 0.03

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ArgumentError(f"lr must be positive, got {self.lr}")
        if self.total_steps < 1:
            raise ArgumentError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ArgumentError(
                f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}"
            )
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ArgumentError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0:
            raise ArgumentError(f"eps must be positive, got {self.eps}")
        if self.max_grad_norm <= 0:
            raise ArgumentError(
                f"max_grad_norm must be positive, got {self.max_grad_norm}"
            )

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)


@dataclass(frozen=True)
class OptimizerState:
    """First/second moments per trainable entry plus the global step counter.

    The counter never resets between rounds: one client follows a single
    warmup trajectory no matter how the steps are sliced into rounds.
    """

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_state(params: ParameterSet) -> OptimizerState:
    m = {n: np.zeros(params.tensor(n).size) for n in params.trainable_names()}
    v = {n: np.zeros(params.tensor(n).size) for n in params.trainable_names()}
    return OptimizerState(step=0, m=m, v=v)


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear ramp 0 -> lr over the warmup window, constant lr afterwards."""
    if step < 0:
        raise ArgumentError(f"step must be >= 0, got {step}")
    w = cfg.warmup_steps
    if w == 0 or step >= w:
        return cfg.lr
    return cfg.lr * step / w


def clip_gradients(grads: ParameterSet, max_norm: float) -> ParameterSet:
    if max_norm <= 0:
        raise ArgumentError(f"max_norm must be positive, got {max_norm}")
    norm = l2_norm(grads)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return grads.replace_values(
        {n: grads.array(n) * factor for n in grads.trainable_names()}
    )


def adamw_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    cfg: OptimizerConfig,
) -> tuple[ParameterSet, OptimizerState]:
    b1, b2 = cfg.betas
    # lr is taken at the pre-increment counter, so the first warmup step is
    # a pure moment update (lr 0), matching the usual scheduler convention.
    lr = lr_at(state.step, cfg)
    t = state.step + 1
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    updated: dict[str, np.ndarray] = {}
    for name in params.trainable_names():
        p = params.tensor(name).data
        if name not in grads:
            raise StructureError(f"gradients missing trainable entry {name!r}")
        g_t = grads.tensor(name)
        if g_t.shape != params.tensor(name).shape:
            raise StructureError(
                f"gradient shape {g_t.shape} does not match parameter "
                f"{name!r} shape {params.tensor(name).shape}"
            )
        g = g_t.data
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            raise StructureError(f"optimizer state missing entry {name!r}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        step_vec = lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p = p - lr * cfg.weight_decay * p - step_vec
        new_m[name] = m
        new_v[name] = v
        updated[name] = p
    shaped = {
        n: updated[n].reshape(params.tensor(n).shape) for n in updated
    }
    return (
        params.replace_values(shaped),
        OptimizerState(step=t, m=new_m, v=new_v),
    )


def _epoch_batches(
    n: int, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def local_train_round(
    model: LmModel,
    state: OptimizerState,
    shard: list[list[int]],
    cfg: OptimizerConfig,
    rng: np.random.Generator,
    *,
    batch_size: int,
    steps: int,
) -> tuple[LmModel, OptimizerState, float]:
    """Run `steps` minibatch iterations over the shard, reshuffling per epoch.

    Returns the updated model, the carried optimizer state, and the mean
    per-position training loss across the round's steps (nan when steps=0).
    """
    if not shard:
        raise ArgumentError("training shard is empty")
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    if steps < 0:
        raise ArgumentError(f"steps must be >= 0, got {steps}")
    params = model.params
    losses: list[float] = []
    pending: list[np.ndarray] = []
    for _ in range(steps):
        if not pending:
            pending = _epoch_batches(len(shard), batch_size, rng)
        idx = pending.pop(0)
        batch = [shard[i] for i in idx]
        loss, grads = loss_and_grad(model.with_params(params), batch, rng=rng)
        grads = clip_gradients(grads, cfg.max_grad_norm)
        params, state = adamw_step(params, grads, state, cfg)
        losses.append(loss)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return model.with_params(params), state, mean_loss
