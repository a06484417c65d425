"""Experiment driver: federated, central, and local runs from one config.

The three modes share corpus ingestion, partitioning, and the per-round step
budget so their loss curves sit on the same axis. Central mode is not a
shortcut implementation: it replays the exact federated single-client code
path, including the f32 wire round trips, so a K=1 federated run and a
central run produce bitwise-identical parameters.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .aggregate import ClientUpdate, fedavg_aggregate, gradualdiff_aggregate, mean_delta
from .config import ExperimentConfig, override
from .data import corpus_tokens, partition_iid, sequences_of, split_stream
from .lora import attach
from .metrics import MODES, RoundRecord, bleu, emit_report
from .model import (
    SEED_CLIENT,
    LmConfig,
    LmModel,
    Vocab,
    greedy_decode,
    init_model,
    perplexity_of,
)
from .optim import OptimizerConfig, init_state, local_train_round
from .params import subtract_trainable
from .protocol import (
    ClientTask,
    ProtocolConfig,
    TrafficLedger,
    apply_dense,
    dense_delta,
    run_client,
    run_server,
)
from .transport import TcpListener, memory_pairs, tcp_connect
from .wire import deserialize_params, serialize_params

BLEU_SAMPLES = 24


@dataclass
class ExperimentResult:
    model: LmModel | None  # final global; None in local mode (never aggregated)
    records: list[RoundRecord]
    extras: dict = field(default_factory=dict)
    client_models: list[LmModel] | None = None
    ledger: TrafficLedger | None = None
    csv_path: Path | None = None
    json_path: Path | None = None


@dataclass
class _Setup:
    vocab: Vocab
    val_ids: list[int]
    sequences: list[list[int]]
    shards: list[list[list[int]]]
    model: LmModel
    counts: dict[int, int]
    steps: dict[int, int]


def _setup(cfg: ExperimentConfig) -> _Setup:
    vocab, ids = corpus_tokens(cfg.resolved_corpus_path())
    train_ids, val_ids = split_stream(list(ids), cfg.split)
    sequences = sequences_of(train_ids, cfg.context)
    shards = partition_iid(sequences, cfg.clients, cfg.seed)

    model = init_model(LmConfig(vocab.size, cfg.embed_dim, cfg.context), cfg.seed)
    if cfg.lora_rank >= 1:
        model = attach(
            model,
            cfg.targets(),
            cfg.lora_rank,
            cfg.lora_alpha,
            dropout_p=cfg.lora_dropout,
            seed=cfg.seed,
        )

    counts = {i: len(shards[i]) for i in range(cfg.clients)}
    steps = {
        i: cfg.local_epochs * math.ceil(counts[i] / cfg.batch_size)
        for i in range(cfg.clients)
    }
    return _Setup(vocab, val_ids, sequences, shards, model, counts, steps)


def _protocol_config(cfg: ExperimentConfig) -> ProtocolConfig:
    return ProtocolConfig(
        rounds=cfg.rounds,
        aggregation=cfg.aggregation,
        delta_form=cfg.delta_form,
        delta_weighting=cfg.delta_weighting,
        quantize_payload=cfg.quantize_payload,
    )


def _opt_config(cfg: ExperimentConfig, steps_per_round: int) -> OptimizerConfig:
    return OptimizerConfig(
        lr=cfg.lr,
        total_steps=cfg.rounds * steps_per_round,
        weight_decay=cfg.weight_decay,
        max_grad_norm=cfg.max_grad_norm,
        warmup_ratio=cfg.warmup_ratio,
    )


def _eval_ppl(model: LmModel, setup: _Setup, cfg: ExperimentConfig) -> float:
    return perplexity_of(model, setup.val_ids, cfg.context)


def bleu_of(model: LmModel, setup: _Setup, cfg: ExperimentConfig) -> float:
    """Mean sentence BLEU of greedy continuations over held-out windows."""
    windows = [
        w for w in sequences_of(setup.val_ids, cfg.context) if len(w) >= 4
    ][:BLEU_SAMPLES]
    if not windows:
        return 0.0
    scores = []
    for w in windows:
        cut = len(w) // 2
        prefix, ref = w[:cut], [int(x) for x in w[cut:]]
        hyp = [int(x) for x in greedy_decode(model, prefix, len(ref))]
        scores.append(bleu(hyp, [ref]))
    return float(np.mean(scores))


def _eval_only_result(mode: str, setup: _Setup, cfg: ExperimentConfig) -> ExperimentResult:
    rec = RoundRecord(0, mode, float("nan"), _eval_ppl(setup.model, setup, cfg), 0, 0, 0)
    extras = {"bleu": bleu_of(setup.model, setup, cfg)}
    if mode == "local":
        return ExperimentResult(None, [rec], extras, client_models=[setup.model] * cfg.clients)
    return ExperimentResult(setup.model, [rec], extras)


# -- federated ---------------------------------------------------------------


def _open_channels(cfg: ExperimentConfig):
    """-> (acquire_server_channels, per-client connect fns, cleanup)."""
    if cfg.transport == "memory":
        server_sides, client_sides = memory_pairs(cfg.clients)
        return (
            lambda: server_sides,
            [lambda i=i: client_sides[i] for i in range(cfg.clients)],
            lambda: None,
        )
    listener = TcpListener(cfg.tcp_host, cfg.tcp_port)
    return (
        lambda: listener.accept(cfg.clients),
        [
            lambda: tcp_connect(listener.host, listener.port)
            for _ in range(cfg.clients)
        ],
        listener.close,
    )


def run_federated(cfg: ExperimentConfig, setup: _Setup | None = None) -> ExperimentResult:
    setup = setup or _setup(cfg)
    if cfg.rounds == 0:
        return _eval_only_result("federated", setup, cfg)

    pcfg = _protocol_config(cfg)
    tasks = [
        ClientTask(
            client_id=i,
            shard=setup.shards[i],
            opt_cfg=_opt_config(cfg, setup.steps[i]),
            batch_size=cfg.batch_size,
            steps_per_round=setup.steps[i],
            seed=cfg.seed,
        )
        for i in range(cfg.clients)
    ]

    acquire, connectors, cleanup = _open_channels(cfg)
    results: list = [None] * cfg.clients
    failures: list = [None] * cfg.clients

    def client_main(i: int) -> None:
        try:
            channel = connectors[i]()
            try:
                results[i] = run_client(channel, setup.model, tasks[i], pcfg)
            finally:
                if hasattr(channel, "close"):
                    channel.close()
        except Exception as e:  # surfaced after join
            failures[i] = e

    threads = [
        threading.Thread(target=client_main, args=(i,), name=f"client-{i}")
        for i in range(cfg.clients)
    ]
    for th in threads:
        th.start()

    snapshots: dict[int, LmModel] = {}
    try:
        model, ledger = run_server(
            setup.model,
            acquire(),
            pcfg,
            sample_counts=setup.counts,
            on_round=lambda t, m: snapshots.__setitem__(t, m),
        )
    finally:
        for th in threads:
            th.join()
        cleanup()
    for e in failures:
        if e is not None:
            raise e

    records = []
    for t in range(1, cfg.rounds + 1):
        loss = float(np.mean([results[i].losses[t - 1] for i in range(cfg.clients)]))
        records.append(
            RoundRecord(
                t,
                "federated",
                loss,
                _eval_ppl(snapshots[t], setup, cfg),
                int(ledger.wall_ms(t)),
                ledger.uplink_bytes(t),
                ledger.downlink_bytes(t),
            )
        )
    extras = {
        "bleu": bleu_of(model, setup, cfg),
        "overhead_bytes": {
            "join_uplink": ledger.uplink_bytes(0),
            "shutdown_downlink": ledger.downlink_bytes(cfg.rounds + 1),
        },
    }
    return ExperimentResult(model, records, extras, ledger=ledger)


# -- central -----------------------------------------------------------------


def _wire_round_trip(params, subset, trainable=None, quantize=False):
    data = serialize_params(params, subset, quantize_payload=quantize)
    return deserialize_params(data, trainable=trainable)


def run_central(cfg: ExperimentConfig, setup: _Setup | None = None) -> ExperimentResult:
    """One trainer on the full training split at the federated step budget.

    Every value that would have crossed the wire in a federated run goes
    through the same serialize/deserialize casts here, so central is the
    exact K=1 trajectory rather than an approximation of it.
    """
    setup = setup or _setup(cfg)
    if cfg.rounds == 0:
        return _eval_only_result("central", setup, cfg)

    pcfg = _protocol_config(cfg)
    data = partition_iid(setup.sequences, 1, cfg.seed)[0]
    steps_per_round = sum(setup.steps.values())
    n_total = sum(setup.counts.values())
    opt_cfg = _opt_config(cfg, steps_per_round)
    rng = np.random.default_rng([cfg.seed, SEED_CLIENT, 0])
    trainable_names = set(setup.model.params.trainable_names())

    global_model = setup.model
    worker = setup.model
    state = init_state(worker.params)
    records = []

    for t in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        if t == 1 or not pcfg.trainable_only_broadcasts:
            worker = worker.with_params(
                _wire_round_trip(global_model.params, "all", trainable_names)
            )
        else:
            incoming = _wire_round_trip(
                global_model.params, "trainable", trainable_names
            )
            worker = worker.with_params(
                worker.params.replace_values(
                    {n: incoming.array(n) for n in incoming.names()}
                )
            )
        start_params = worker.params

        worker, state, loss = local_train_round(
            worker,
            state,
            data,
            opt_cfg,
            rng,
            batch_size=cfg.batch_size,
            steps=steps_per_round,
        )

        if cfg.aggregation == "fedavg":
            up = _wire_round_trip(worker.params, "all", trainable_names)
            new_params = fedavg_aggregate(
                [ClientUpdate(0, t, n_total, "full", up)]
            )
        elif cfg.delta_form == "factors":
            delta = _wire_round_trip(
                subtract_trainable(worker.params, start_params),
                "all",
                quantize=cfg.quantize_payload,
            )
            new_params = gradualdiff_aggregate(
                global_model.params,
                [ClientUpdate(0, t, n_total, "delta", delta, form="factors")],
                cfg.delta_weighting,
            )
        else:
            delta = _wire_round_trip(
                dense_delta(worker, start_params),
                "all",
                quantize=cfg.quantize_payload,
            )
            update = ClientUpdate(0, t, n_total, "delta", delta, form="dense")
            new_params = apply_dense(
                global_model.params, mean_delta([update], cfg.delta_weighting)
            )
        global_model = global_model.with_params(new_params)
        wall_ms = int((time.perf_counter() - start) * 1000.0)
        records.append(
            RoundRecord(
                t, "central", loss, _eval_ppl(global_model, setup, cfg), wall_ms, 0, 0
            )
        )

    extras = {"bleu": bleu_of(global_model, setup, cfg)}
    return ExperimentResult(global_model, records, extras)


# -- local -------------------------------------------------------------------


def run_local(cfg: ExperimentConfig, setup: _Setup | None = None) -> ExperimentResult:
    """K trainers that never communicate; records average their curves."""
    setup = setup or _setup(cfg)
    if cfg.rounds == 0:
        return _eval_only_result("local", setup, cfg)

    losses = np.zeros((cfg.clients, cfg.rounds))
    ppls = np.zeros((cfg.clients, cfg.rounds))
    walls = np.zeros((cfg.clients, cfg.rounds))
    models: list[LmModel] = []

    for i in range(cfg.clients):
        rng = np.random.default_rng([cfg.seed, SEED_CLIENT, i])
        worker = setup.model
        state = init_state(worker.params)
        opt_cfg = _opt_config(cfg, setup.steps[i])
        for t in range(cfg.rounds):
            start = time.perf_counter()
            worker, state, loss = local_train_round(
                worker,
                state,
                setup.shards[i],
                opt_cfg,
                rng,
                batch_size=cfg.batch_size,
                steps=setup.steps[i],
            )
            walls[i, t] = (time.perf_counter() - start) * 1000.0
            losses[i, t] = loss
            ppls[i, t] = _eval_ppl(worker, setup, cfg)
        models.append(worker)

    records = [
        RoundRecord(
            t + 1,
            "local",
            float(losses[:, t].mean()),
            float(ppls[:, t].mean()),
            int(walls[:, t].sum()),  # clients run sequentially here
            0,
            0,
        )
        for t in range(cfg.rounds)
    ]
    extras = {
        "bleu": float(np.mean([bleu_of(m, setup, cfg) for m in models])),
        "clients": {
            str(i): {
                "final_train_loss": float(losses[i, -1]),
                "train_loss": [float(x) for x in losses[i]],
                "perplexity": [float(x) for x in ppls[i]],
            }
            for i in range(cfg.clients)
        },
    }
    return ExperimentResult(None, records, extras, client_models=models)


# -- entry points ------------------------------------------------------------

_RUNNERS = {"federated": run_federated, "central": run_central, "local": run_local}


def run_experiment(cfg: ExperimentConfig, report: bool = True) -> ExperimentResult:
    result = _RUNNERS[cfg.mode](cfg)
    if report:
        extras = dict(result.extras)
        extras["config"] = asdict(cfg)
        result.csv_path, result.json_path = emit_report(
            result.records, cfg.output_dir, summary_extra=extras
        )
    return result


COMPARE_COLUMNS = ("round", "mode", "train_loss", "perplexity", "uplink_bytes", "downlink_bytes")


def _cell(x: float | None) -> str:
    return "" if x is None else f"{x:.9g}"


def compare_modes(cfg: ExperimentConfig, out_dir: str | Path | None = None):
    """Run all three modes on identical data and seed; -> (csv, json) paths.

    The joint CSV carries no wall times, so a repeated run with the same
    config and seed reproduces it byte for byte on the memory transport.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    results = {
        mode: run_experiment(override(cfg, mode=mode), report=False)
        for mode in MODES
    }

    rows = [",".join(COMPARE_COLUMNS)]
    for mode in MODES:
        for rec in results[mode].records:
            rows.append(
                f"{rec.round},{rec.mode},{_cell(rec.train_loss)},"
                f"{_cell(rec.perplexity)},{rec.uplink_bytes},{rec.downlink_bytes}"
            )
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "compare.csv"
    csv_path.write_text("\n".join(rows) + "\n")

    summary = {"config": asdict(cfg), "modes": {}}
    for mode in MODES:
        recs = results[mode].records
        summary["modes"][mode] = {
            "rounds": len(recs),
            "final_train_loss": None
            if math.isnan(recs[-1].train_loss)
            else recs[-1].train_loss,
            "final_perplexity": recs[-1].perplexity,
            "total_uplink_bytes": sum(r.uplink_bytes for r in recs),
            "total_downlink_bytes": sum(r.downlink_bytes for r in recs),
            "total_wall_ms": sum(r.wall_ms for r in recs),
            "bleu": results[mode].extras["bleu"],
        }
    json_path = out / "compare_summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path
