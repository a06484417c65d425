"""Round state machine for the delta-averaging federation.

Server loop per round t: broadcast the global model (full set in round 1,
trainable entries only afterwards when running delta aggregation with factor
deltas), block until all K clients answer for round t, aggregate, advance.
Join handshakes are acks for round 0; the final shutdown is ledgered under
round T+1. All byte counts are taken on encoded messages, so memory and TCP
transports account identically.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .aggregate import (
    FORM_DENSE,
    FORM_FACTORS,
    ClientUpdate,
    fedavg_aggregate,
    gradualdiff_aggregate,
    mean_delta,
)
from .errors import ArgumentError, ProtocolError
from .model import SEED_CLIENT, LmModel
from .optim import OptimizerConfig, OptimizerState, init_state, local_train_round
from .params import ParameterSet, Tensor, check_compatible, subtract_trainable
from .wire import (
    FLAG_FACTORS,
    FLAG_QUANTIZED,
    KIND_DELTA_UPDATE,
    KIND_FULL_MODEL_UPDATE,
    KIND_GLOBAL_BROADCAST,
    KIND_ROUND_ACK,
    KIND_SHUTDOWN,
    WireMessage,
    decode_message,
    deserialize_params,
    encode_message,
    serialize_params,
)

SERVER_SENDER = 0xFFFFFFFF

AGG_GRADUALDIFF = "gradualdiff"
AGG_FEDAVG = "fedavg"


@dataclass(frozen=True)
class ProtocolConfig:
    rounds: int
    aggregation: str = AGG_GRADUALDIFF
    delta_form: str = FORM_FACTORS
    delta_weighting: str = "uniform"
    quantize_payload: bool = False

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ArgumentError(f"rounds must be >= 0, got {self.rounds}")
        if self.aggregation not in (AGG_GRADUALDIFF, AGG_FEDAVG):
            raise ArgumentError(f"unknown aggregation {self.aggregation!r}")
        if self.delta_form not in (FORM_FACTORS, FORM_DENSE):
            raise ArgumentError(f"unknown delta_form {self.delta_form!r}")
        if self.delta_weighting not in ("uniform", "samples"):
            raise ArgumentError(
                f"unknown delta_weighting {self.delta_weighting!r}"
            )

    @property
    def trainable_only_broadcasts(self) -> bool:
        return self.aggregation == AGG_GRADUALDIFF and self.delta_form == FORM_FACTORS


class TrafficLedger:
    """Per-round, per-client byte and message counts for both directions."""

    def __init__(self) -> None:
        self._rounds: dict[int, dict] = {}

    def _slot(self, rnd: int) -> dict:
        if rnd not in self._rounds:
            self._rounds[rnd] = {
                "down": {},
                "up": {},
                "down_msgs": {},
                "up_msgs": {},
                "wall_ms": 0.0,
            }
        return self._rounds[rnd]

    def add_down(self, rnd: int, client_id: int, nbytes: int) -> None:
        slot = self._slot(rnd)
        slot["down"][client_id] = slot["down"].get(client_id, 0) + nbytes
        slot["down_msgs"][client_id] = slot["down_msgs"].get(client_id, 0) + 1

    def add_up(self, rnd: int, client_id: int, nbytes: int) -> None:
        slot = self._slot(rnd)
        slot["up"][client_id] = slot["up"].get(client_id, 0) + nbytes
        slot["up_msgs"][client_id] = slot["up_msgs"].get(client_id, 0) + 1

    def set_wall_ms(self, rnd: int, ms: float) -> None:
        self._slot(rnd)["wall_ms"] = ms

    def wall_ms(self, rnd: int) -> float:
        return self._rounds.get(rnd, {}).get("wall_ms", 0.0)

    def rounds(self) -> list[int]:
        return sorted(self._rounds)

    def downlink_bytes(self, rnd: int | None = None) -> int:
        rounds = [rnd] if rnd is not None else self.rounds()
        return sum(
            sum(self._rounds[r]["down"].values())
            for r in rounds
            if r in self._rounds
        )

    def uplink_bytes(self, rnd: int | None = None) -> int:
        rounds = [rnd] if rnd is not None else self.rounds()
        return sum(
            sum(self._rounds[r]["up"].values())
            for r in rounds
            if r in self._rounds
        )

    def client_bytes(self, rnd: int, client_id: int) -> tuple[int, int]:
        """-> (downlink, uplink) for one client in one round."""
        slot = self._rounds.get(rnd, {})
        return (
            slot.get("down", {}).get(client_id, 0),
            slot.get("up", {}).get(client_id, 0),
        )

    def total_bytes(self) -> int:
        return self.downlink_bytes() + self.uplink_bytes()

    def byte_table(self) -> dict:
        """Canonical timing-free view, comparable across transports."""
        out = {}
        for rnd in self.rounds():
            slot = self._rounds[rnd]
            out[rnd] = {
                "down": dict(sorted(slot["down"].items())),
                "up": dict(sorted(slot["up"].items())),
                "down_msgs": dict(sorted(slot["down_msgs"].items())),
                "up_msgs": dict(sorted(slot["up_msgs"].items())),
            }
        return out


def measure_round_traffic(ledger: TrafficLedger, rnd: int) -> dict:
    if rnd not in ledger.rounds():
        raise ArgumentError(f"round {rnd} not in ledger")
    return {
        "uplink_bytes": ledger.uplink_bytes(rnd),
        "downlink_bytes": ledger.downlink_bytes(rnd),
        "wall_ms": ledger.wall_ms(rnd),
    }


def _expect(cond: bool, message: str, ledger: TrafficLedger) -> None:
    if not cond:
        raise ProtocolError(message, ledger=ledger)


def _recv(channel, ledger: TrafficLedger) -> bytes:
    """recv that re-raises transport failures with the partial ledger attached."""
    try:
        return channel.recv()
    except ProtocolError as e:
        if e.ledger is None:
            raise ProtocolError(str(e), ledger=ledger) from e
        raise


def run_server(
    model: LmModel,
    channels: list,
    pcfg: ProtocolConfig,
    sample_counts: dict[int, int] | None = None,
    on_round=None,
) -> tuple[LmModel, TrafficLedger]:
    """Drive T rounds over the given per-client channels.

    `channels` carry one client each, in any order; the join ack's sender_id
    binds them. Returns the final global model and the server-side ledger.
    `on_round(t, model)` fires after each round, off the round clock.
    """
    ledger = TrafficLedger()
    if pcfg.rounds == 0 or not channels:
        return model, ledger

    k = len(channels)
    by_client: dict[int, object] = {}
    for ch in channels:
        raw = _recv(ch, ledger)
        msg = decode_message(raw)
        _expect(
            msg.kind == KIND_ROUND_ACK and msg.round == 0,
            f"expected a join ack, got kind {msg.kind} round {msg.round}",
            ledger,
        )
        _expect(
            msg.sender_id not in by_client,
            f"duplicate join from client {msg.sender_id}",
            ledger,
        )
        by_client[msg.sender_id] = ch
        ledger.add_up(0, msg.sender_id, len(raw))
    client_ids = sorted(by_client)

    counts = sample_counts or {cid: 1 for cid in client_ids}
    for cid in client_ids:
        _expect(cid in counts, f"no sample count for client {cid}", ledger)

    expect_kind = (
        KIND_DELTA_UPDATE
        if pcfg.aggregation == AGG_GRADUALDIFF
        else KIND_FULL_MODEL_UPDATE
    )
    trainable_names = set(model.params.trainable_names())

    for t in range(1, pcfg.rounds + 1):
        start = time.perf_counter()
        subset = "all" if t == 1 or not pcfg.trainable_only_broadcasts else "trainable"
        flags = FLAG_FACTORS if pcfg.trainable_only_broadcasts else 0
        raw = encode_message(
            WireMessage(
                KIND_GLOBAL_BROADCAST,
                t,
                SERVER_SENDER,
                flags,
                serialize_params(model.params, subset),
            )
        )
        for cid in client_ids:
            by_client[cid].send(raw)
            ledger.add_down(t, cid, len(raw))

        updates = []
        for cid in client_ids:
            raw = _recv(by_client[cid], ledger)
            msg = decode_message(raw)
            ledger.add_up(t, cid, len(raw))
            _expect(
                msg.round == t,
                f"client {cid} answered for round {msg.round}, expected {t}",
                ledger,
            )
            _expect(
                msg.sender_id == cid,
                f"update on client {cid}'s channel claims sender "
                f"{msg.sender_id}",
                ledger,
            )
            _expect(
                msg.kind == expect_kind,
                f"client {cid} sent kind {msg.kind}, expected {expect_kind}",
                ledger,
            )
            if pcfg.aggregation == AGG_FEDAVG:
                params = deserialize_params(msg.payload, trainable=trainable_names)
                updates.append(ClientUpdate(cid, t, counts[cid], "full", params))
            else:
                params = deserialize_params(msg.payload)
                updates.append(
                    ClientUpdate(
                        cid, t, counts[cid], "delta", params, form=pcfg.delta_form
                    )
                )

        if pcfg.aggregation == AGG_FEDAVG:
            new_params = fedavg_aggregate(updates)
        elif pcfg.delta_form == FORM_FACTORS:
            new_params = gradualdiff_aggregate(
                model.params, updates, pcfg.delta_weighting
            )
        else:
            new_params = apply_dense(
                model.params, mean_delta(updates, pcfg.delta_weighting), ledger
            )
        model = model.with_params(new_params)
        ledger.set_wall_ms(t, (time.perf_counter() - start) * 1000.0)
        if on_round is not None:
            on_round(t, model)

    raw = encode_message(
        WireMessage(KIND_SHUTDOWN, pcfg.rounds + 1, SERVER_SENDER)
    )
    for cid in client_ids:
        by_client[cid].send(raw)
        ledger.add_down(pcfg.rounds + 1, cid, len(raw))
    return model, ledger


def apply_dense(
    params: ParameterSet, mean: ParameterSet, ledger: TrafficLedger | None = None
) -> ParameterSet:
    """Fold dense per-target deltas into the base and restart the factors."""
    new_vals: dict[str, np.ndarray] = {}
    for name, t, _ in mean.items():
        _expect(name in params, f"dense delta targets unknown entry {name!r}", ledger)
        base = params.tensor(name)
        _expect(
            base.shape == t.shape,
            f"dense delta for {name!r} has shape {t.shape}, base is {base.shape}",
            ledger,
        )
        b_name = f"{name}.lora.B"
        _expect(
            b_name in params,
            f"dense aggregation needs factor entry {b_name!r}",
            ledger,
        )
        new_vals[name] = params.array(name) + mean.array(name)
        new_vals[b_name] = np.zeros(params.tensor(b_name).shape)
    return params.replace_values(new_vals)


@dataclass(frozen=True)
class ClientTask:
    client_id: int
    shard: list
    opt_cfg: OptimizerConfig
    batch_size: int
    steps_per_round: int
    seed: int


@dataclass
class ClientResult:
    model: LmModel
    state: OptimizerState
    losses: list[float] = field(default_factory=list)
    ledger: TrafficLedger = field(default_factory=TrafficLedger)


def dense_delta(model: LmModel, start: ParameterSet) -> ParameterSet:
    entries = []
    for target in sorted(model.adapters):
        ad = model.adapters[target]
        a0 = start.array(f"{target}.lora.A")
        b0 = start.array(f"{target}.lora.B")
        a1 = model.params.array(f"{target}.lora.A")
        b1 = model.params.array(f"{target}.lora.B")
        d = ad.scaling * (a1 @ b1 - a0 @ b0)
        entries.append((target, Tensor.from_array(d), True))
    if not entries:
        raise ProtocolError("dense deltas require an adapted model")
    return ParameterSet(entries)


def run_client(
    channel, model: LmModel, task: ClientTask, pcfg: ProtocolConfig
) -> ClientResult:
    """Mirror of the server loop for one client; runs until shutdown."""
    ledger = TrafficLedger()
    rng = np.random.default_rng([task.seed, SEED_CLIENT, task.client_id])
    state = init_state(model.params)
    losses: list[float] = []
    trainable_names = set(model.params.trainable_names())

    raw = encode_message(WireMessage(KIND_ROUND_ACK, 0, task.client_id))
    channel.send(raw)
    ledger.add_up(0, task.client_id, len(raw))

    expected = 1
    while True:
        raw = _recv(channel, ledger)
        msg = decode_message(raw)
        ledger.add_down(msg.round, task.client_id, len(raw))
        if msg.kind == KIND_SHUTDOWN:
            if msg.round != expected:
                raise ProtocolError(
                    f"shutdown for round {msg.round}, expected {expected}",
                    ledger=ledger,
                )
            break
        if msg.kind != KIND_GLOBAL_BROADCAST or msg.round != expected:
            raise ProtocolError(
                f"expected broadcast for round {expected}, got kind "
                f"{msg.kind} round {msg.round}",
                ledger=ledger,
            )
        incoming = deserialize_params(msg.payload, trainable=trainable_names)
        if expected == 1 or not pcfg.trainable_only_broadcasts:
            check_compatible(model.params, incoming)
            new_params = incoming
        else:
            new_params = model.params.replace_values(
                {n: incoming.array(n) for n in incoming.names()}
            )
        model = model.with_params(new_params)
        start_params = model.params

        model, state, loss = local_train_round(
            model,
            state,
            task.shard,
            task.opt_cfg,
            rng,
            batch_size=task.batch_size,
            steps=task.steps_per_round,
        )
        losses.append(loss)

        if pcfg.aggregation == AGG_FEDAVG:
            kind = KIND_FULL_MODEL_UPDATE
            flags = 0
            payload = serialize_params(model.params, "all")
        elif pcfg.delta_form == FORM_FACTORS:
            kind = KIND_DELTA_UPDATE
            flags = FLAG_FACTORS | (FLAG_QUANTIZED if pcfg.quantize_payload else 0)
            delta = subtract_trainable(model.params, start_params)
            payload = serialize_params(
                delta, "all", quantize_payload=pcfg.quantize_payload
            )
        else:
            kind = KIND_DELTA_UPDATE
            flags = FLAG_QUANTIZED if pcfg.quantize_payload else 0
            payload = serialize_params(
                dense_delta(model, start_params),
                "all",
                quantize_payload=pcfg.quantize_payload,
            )
        raw = encode_message(
            WireMessage(kind, expected, task.client_id, flags, payload)
        )
        channel.send(raw)
        ledger.add_up(expected, task.client_id, len(raw))
        expected += 1

    return ClientResult(model=model, state=state, losses=losses, ledger=ledger)
