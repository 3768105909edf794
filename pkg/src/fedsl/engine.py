"""Client and server state machines and the round loop of lightweight federated split learning.

One round ``t``:

1. every client runs its layers ``1..L_c`` on a minibatch, drops whole
   split-layer rows with probability ``p`` and uploads the smashed data;
2. the server finishes the forward pass per client, backpropagates, returns
   the split-layer gradients (kept rows only) and applies one averaged SGD
   step to its layers;
3. every client backpropagates, prunes by importance when its sparsity is
   below the scheduled target, quantizes the masked weight gradient and
   takes an SGD step;
4. every ``I`` rounds the client-side models are averaged and broadcast.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from fedsl import wire
from fedsl.compression import (
    DropoutSpec,
    PruneMask,
    QuantizerSpec,
    SparsitySchedule,
    apply_mask,
    build_mask,
    dropout_backward,
    dropout_forward,
    importance,
    quantize,
    sparsity,
)
from fedsl.config import ExperimentConfig
from fedsl.data import BatchSampler, Dataset, make_blobs, partition_iid
from fedsl.errors import DimensionError, InputError, ProtocolError
from fedsl.nn import (
    STREAM_CHANNEL,
    STREAM_DROPOUT,
    STREAM_INIT,
    STREAM_QUANT,
    Activation,
    DenseLayer,
    backward_stack,
    forward_stack,
    init_layers,
    make_rng,
    softmax_cross_entropy,
)
from fedsl.wireless import LinkParams, latency, link_rate, round_latency

METRICS_COLUMNS = [
    "round",
    "loss",
    "accuracy",
    "mean_sparsity",
    "uplink_bytes",
    "downlink_bytes",
    "comm_latency_s",
    "cumulative_latency_s",
]


@dataclass
class SplitModelConfig:
    layer_dims: list
    split: int
    activations: list | None = None

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 3:
            raise InputError("a split model needs at least two layers")
        if not 1 <= self.split < self.L:
            raise InputError(f"split layer must satisfy 1 <= L_c < L = {self.L}, got {self.split}")
        if self.activations is None:
            self.activations = [Activation.RELU] * (self.L - 1) + [Activation.IDENTITY]
        self.activations = [Activation(a) for a in self.activations]
        if len(self.activations) != self.L:
            raise InputError(f"need {self.L} activations, got {len(self.activations)}")

    @property
    def L(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def feature_dim(self) -> int:
        """Width of the split-layer activations."""
        return self.layer_dims[self.split]

    def init(self, rng) -> tuple[list[DenseLayer], list[DenseLayer]]:
        layers = init_layers(self.layer_dims, rng, self.activations)
        return layers[: self.split], layers[self.split :]


def _params(layers):
    return [(layer.weights.copy(), layer.bias.copy()) for layer in layers]


def _shapes(layers):
    return [layer.weights.shape for layer in layers]


class ClientState:
    """Client ``k``: layers ``1..L_c``, one prune mask per weight matrix, local shard."""

    def __init__(self, client_id: int, layers, x, y, sampler: BatchSampler | None = None):
        self.id = client_id
        self.layers = [layer.copy() for layer in layers]
        self.masks = [PruneMask.ones(layer.weights.shape) for layer in self.layers]
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y)
        self.sampler = sampler

    def batch(self, t: int):
        idx = self.sampler.indices(t)
        return self.x[idx], self.y[idx]

    def layer_sparsity(self) -> list[float]:
        return [sparsity(layer.weights) for layer in self.layers]

    def overall_sparsity(self) -> float:
        zeros = sum(layer.weights.size - np.count_nonzero(layer.weights) for layer in self.layers)
        return zeros / sum(layer.weights.size for layer in self.layers)


class ServerState:
    """Server-side layers ``L_c+1..L``, shared by all clients between rounds."""

    def __init__(self, layers):
        self.layers = [layer.copy() for layer in layers]

    def replicas(self, n: int) -> list[list[DenseLayer]]:
        return [[layer.copy() for layer in self.layers] for _ in range(n)]


@dataclass
class ForwardCache:
    layer_caches: list
    keep: np.ndarray
    dropout: DropoutSpec

    @property
    def batch_size(self) -> int:
        return len(self.keep)


def client_forward(client: ClientState, x, y, t: int, dropout: DropoutSpec, rng) -> tuple[ForwardCache, wire.SmashedData]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise InputError("empty batch")
    if y.shape != (x.shape[0],):
        raise DimensionError(f"labels {y.shape} vs batch {x.shape}")
    act, caches = forward_stack(client.layers, x)
    dropped, keep = dropout_forward(act, dropout, rng)
    kept = np.flatnonzero(keep)
    smashed = wire.SmashedData(
        round=t,
        client_id=client.id,
        kept_row_indices=kept,
        kept_rows=dropped[kept],
        labels=y.copy(),
        feature_dim=act.shape[1],
    )
    return ForwardCache(caches, keep, dropout), smashed


def server_round(server: ServerState, smashed: list, eta: float, mode: str = "gradient"):
    """Finish forward/backward for every client and update the server layers once.

    ``mode="gradient"`` subtracts the client-averaged gradient from the shared
    weights; ``mode="replica"`` updates one replica per client and averages the
    replicas. Both start from identical replicas.

    Returns ``(activation_grads, new_server, losses)``.
    """
    if not smashed:
        raise InputError("server_round needs at least one client message")
    in_dim = server.layers[0].in_dim
    n_clients = len(smashed)
    per_client = []
    out_msgs = []
    losses = []
    for msg in smashed:
        if msg.feature_dim != in_dim or msg.kept_rows.shape != (msg.kept_count, in_dim):
            raise ProtocolError(
                f"client {msg.client_id}: smashed rows {msg.kept_rows.shape} do not fit server input {in_dim}"
            )
        if msg.kept_count and (msg.kept_row_indices.max() >= msg.batch_size or msg.kept_row_indices.min() < 0):
            raise ProtocolError(f"client {msg.client_id}: kept row index outside the batch")
        logits, caches = forward_stack(server.layers, msg.dense())
        loss, d_logits = softmax_cross_entropy(logits, msg.labels)
        grads, d_act = backward_stack(server.layers, caches, d_logits)
        per_client.append(grads)
        losses.append(loss)
        out_msgs.append(
            wire.ActivationGrads(
                round=msg.round,
                client_id=msg.client_id,
                kept_row_indices=msg.kept_row_indices.copy(),
                rows=d_act[msg.kept_row_indices],
                feature_dim=in_dim,
            )
        )

    new_layers = []
    for i, layer in enumerate(server.layers):
        if mode == "gradient":
            dw = per_client[0][i].d_weights
            db = per_client[0][i].d_bias
            for grads in per_client[1:]:
                dw = dw + grads[i].d_weights
                db = db + grads[i].d_bias
            w = layer.weights - (eta / n_clients) * dw
            b = layer.bias - (eta / n_clients) * db
        elif mode == "replica":
            ws = [layer.weights - eta * grads[i].d_weights for grads in per_client]
            bs = [layer.bias - eta * grads[i].d_bias for grads in per_client]
            w = ws[0]
            b = bs[0]
            for wk, bk in zip(ws[1:], bs[1:]):
                w = w + wk
                b = b + bk
            w = w / n_clients
            b = b / n_clients
        else:
            raise InputError(f"unknown server update mode {mode!r}")
        new_layers.append(DenseLayer(w, b, layer.activation))
    return out_msgs, ServerState(new_layers), losses


@dataclass
class UpdateRecord:
    client_id: int
    round: int
    target: float
    triggered: list
    sparsity_after: list
    weights_before: list
    weights_pruned: list
    grads: list


def client_update(
    client: ClientState,
    cache: ForwardCache,
    act_grads: wire.ActivationGrads,
    t: int,
    schedule: SparsitySchedule,
    qspec: QuantizerSpec,
    eta: float,
    rng,
) -> UpdateRecord:
    """Backpropagate, prune when below the target sparsity, quantize and step.

    Each client keeps a persistent mask. It is applied to weights and gradients
    every round so pruned entries stay exactly zero; it is rebuilt from
    importance scores whenever a layer's sparsity falls below ``rho_t``.
    Biases are never pruned or quantized.
    """
    if act_grads.client_id != client.id:
        raise ProtocolError(f"gradient for client {act_grads.client_id} delivered to client {client.id}")
    if not np.array_equal(act_grads.kept_row_indices, np.flatnonzero(cache.keep)):
        raise ProtocolError("downlink rows do not match the uplink kept rows")
    upstream = dropout_backward(act_grads.dense(cache.batch_size), cache.keep, cache.dropout)
    grads, _ = backward_stack(client.layers, cache.layer_caches, upstream)
    target = schedule.target(t)

    record = UpdateRecord(client.id, t, target, [], [], _params(client.layers), [], [])
    for i, (layer, g) in enumerate(zip(client.layers, grads)):
        record.grads.append((g.d_weights, g.d_bias))
        triggered = sparsity(layer.weights) < target
        if triggered:
            client.masks[i] = build_mask(importance(layer.weights, g.d_weights), target, client.masks[i])
        mask = client.masks[i]
        w_pruned = apply_mask(mask, layer.weights)
        g_pruned = apply_mask(mask, g.d_weights)
        g_quant = quantize(g_pruned, qspec, rng, support=mask.bits)
        record.weights_pruned.append((w_pruned, layer.bias.copy()))
        layer.weights = w_pruned - eta * g_quant
        layer.bias = layer.bias - eta * g.d_bias
        record.triggered.append(bool(triggered))
        record.sparsity_after.append(sparsity(layer.weights))
    return record


def aggregate_clients(clients) -> list[DenseLayer]:
    """Uniform average of every client's weights and biases."""
    if not clients:
        raise InputError("cannot aggregate an empty client list")
    out = []
    for i, ref in enumerate(clients[0].layers):
        w = np.mean(np.stack([c.layers[i].weights for c in clients]), axis=0)
        b = np.mean(np.stack([c.layers[i].bias for c in clients]), axis=0)
        out.append(DenseLayer(w, b, ref.activation))
    return out


def broadcast(clients, layers) -> None:
    """Install the aggregated model verbatim on every client.

    Masks are not averaged: each client keeps its own, minus the entries the
    aggregate made non-zero again, so no pruning happens on receipt.
    """
    for client in clients:
        client.layers = [layer.copy() for layer in layers]
        for i, layer in enumerate(client.layers):
            client.masks[i] = PruneMask(client.masks[i].bits | (layer.weights != 0.0))


def accuracy(client_layers, server_layers, x, y) -> float:
    logits, _ = forward_stack(list(client_layers) + list(server_layers), x)
    return float(np.mean(logits.argmax(axis=1) == y))


@dataclass
class RoundMetrics:
    round: int
    loss: float
    accuracy: float
    client_sparsity: list
    uplink_bytes: list
    downlink_bytes: list
    uplink_latency_s: list
    downlink_latency_s: list
    comm_latency_s: float
    cumulative_latency_s: float
    aggregated: bool = False
    prune_events: list = field(default_factory=list)
    # [k][l] weight sparsity right after client_update, before any aggregation
    update_sparsity: list = field(default_factory=list)

    @property
    def mean_sparsity(self) -> float:
        return float(np.mean(self.client_sparsity))

    @property
    def total_uplink_bytes(self) -> int:
        return int(sum(self.uplink_bytes))

    @property
    def total_downlink_bytes(self) -> int:
        return int(sum(self.downlink_bytes))

    def row(self) -> list:
        return [
            self.round,
            repr(self.loss),
            repr(self.accuracy),
            repr(self.mean_sparsity),
            self.total_uplink_bytes,
            self.total_downlink_bytes,
            repr(self.comm_latency_s),
            repr(self.cumulative_latency_s),
        ]


@dataclass
class PruneEvent:
    round: int
    client_id: int
    layer: int
    target: float
    sparsity_after: float


@dataclass
class RoundTrace:
    """Per-round tensors the convergence checks need (float64, in memory)."""

    round: int
    client_weights: list  # [k] -> [(w, b)] before pruning
    client_pruned: list  # [k] -> [(w, b)] after pruning
    client_grads: list  # [k] -> [(dw, db)]
    server_weights: list  # [(w, b)] at the start of the round


@dataclass
class Trace:
    eta: float
    I: int
    rho_f: float
    T: int
    L_c: int
    rounds: list = field(default_factory=list)


class World:
    """Everything one experiment mutates: clients, server, links, counters."""

    def __init__(self, cfg: ExperimentConfig, record: bool = False):
        self.cfg = cfg
        self.model = SplitModelConfig(cfg.layer_dims, cfg.L_c)
        self.dataset: Dataset = make_blobs(
            cfg.seed,
            cfg.n_train,
            cfg.n_test,
            cfg.layer_dims[0],
            cfg.n_classes,
            cfg.center_scale,
            cfg.noise_std,
        )
        client_layers, server_layers = self.model.init(make_rng(cfg.seed, STREAM_INIT))
        shards = partition_iid(cfg.seed, cfg.n_train, cfg.K)
        self.clients = [
            ClientState(
                k,
                client_layers,
                self.dataset.x_train[idx],
                self.dataset.y_train[idx],
                BatchSampler(cfg.seed, k, len(idx), cfg.batch),
            )
            for k, idx in enumerate(shards)
        ]
        self.server = ServerState(server_layers)
        self.schedule = SparsitySchedule(cfg.rho_f, cfg.T)
        self.qspec = QuantizerSpec(cfg.q)
        self.dropout = DropoutSpec(cfg.p)
        if cfg.d_meters:
            self.distances_km = [d / 1000.0 for d in cfg.d_meters]
        else:
            self.distances_km = list(make_rng(cfg.seed, STREAM_CHANNEL).uniform(0.1, 0.3, size=cfg.K))
        self.uplink_rates = [
            link_rate(LinkParams(d, cfg.tx_power_client_dbm, cfg.bandwidth_hz, cfg.noise_dbm_per_hz))
            for d in self.distances_km
        ]
        self.downlink_rates = [
            link_rate(LinkParams(d, cfg.tx_power_server_dbm, cfg.bandwidth_hz, cfg.noise_dbm_per_hz))
            for d in self.distances_km
        ]
        self.cumulative_latency_s = 0.0
        self.trace = Trace(cfg.eta, cfg.I, cfg.rho_f, cfg.T, cfg.L_c) if record else None


def run_round(world: World, t: int) -> RoundMetrics:
    cfg = world.cfg
    if not 1 <= t <= cfg.T:
        raise InputError(f"round {t} outside [1, {cfg.T}]")
    clients = world.clients
    server_before = _params(world.server.layers)

    caches, uplink = [], []
    for client in clients:
        x, y = client.batch(t)
        cache, msg = client_forward(client, x, y, t, world.dropout, make_rng(cfg.seed, STREAM_DROPOUT, client.id, t))
        caches.append(cache)
        uplink.append(msg)

    downlink, world.server, losses = server_round(world.server, uplink, cfg.eta, cfg.server_update)

    records = []
    for client, cache, grads in zip(clients, caches, downlink):
        rng = make_rng(cfg.seed, STREAM_QUANT, client.id, t)
        records.append(client_update(client, cache, grads, t, world.schedule, world.qspec, cfg.eta, rng))
    sparsities = [c.overall_sparsity() for c in clients]

    up_bytes = [m.payload_bytes for m in uplink]
    down_bytes = [m.payload_bytes for m in downlink]
    up_s = [latency(b, r) for b, r in zip(up_bytes, world.uplink_rates)]
    down_s = [latency(b, r) for b, r in zip(down_bytes, world.downlink_rates)]
    comm = round_latency(up_s, down_s, cfg.latency_mode)

    aggregated = t % cfg.I == 0
    if aggregated:
        model_size = wire.model_bytes(_shapes(clients[0].layers))
        agg_up = [latency(model_size, r) for r in world.uplink_rates]
        agg_down = [latency(model_size, r) for r in world.downlink_rates]
        comm += round_latency(agg_up, agg_down, cfg.latency_mode)
        up_bytes = [b + model_size for b in up_bytes]
        down_bytes = [b + model_size for b in down_bytes]
        up_s = [a + b for a, b in zip(up_s, agg_up)]
        down_s = [a + b for a, b in zip(down_s, agg_down)]
        broadcast(clients, aggregate_clients(clients))
    world.cumulative_latency_s += comm

    ds = world.dataset
    acc = float(np.mean([accuracy(c.layers, world.server.layers, ds.x_test, ds.y_test) for c in clients]))

    events = [
        PruneEvent(t, r.client_id, i, r.target, r.sparsity_after[i])
        for r in records
        for i, fired in enumerate(r.triggered)
        if fired
    ]
    if world.trace is not None:
        world.trace.rounds.append(
            RoundTrace(
                t,
                [r.weights_before for r in records],
                [r.weights_pruned for r in records],
                [r.grads for r in records],
                server_before,
            )
        )
    return RoundMetrics(
        round=t,
        loss=float(np.mean(losses)),
        accuracy=acc,
        client_sparsity=sparsities,
        uplink_bytes=up_bytes,
        downlink_bytes=down_bytes,
        uplink_latency_s=up_s,
        downlink_latency_s=down_s,
        comm_latency_s=comm,
        cumulative_latency_s=world.cumulative_latency_s,
        aggregated=aggregated,
        prune_events=events,
        update_sparsity=[r.sparsity_after for r in records],
    )


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: list
    world: World

    @property
    def trace(self) -> Trace | None:
        return self.world.trace

    def csv_text(self) -> str:
        return metrics_csv(self.metrics)


def run_experiment(cfg: ExperimentConfig, record: bool = False, on_round=None) -> RunResult:
    world = World(cfg, record=record)
    metrics = []
    for t in range(1, cfg.T + 1):
        m = run_round(world, t)
        metrics.append(m)
        if on_round is not None:
            on_round(world, m)
    return RunResult(cfg, metrics, world)


def metrics_csv(metrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for m in metrics:
        writer.writerow(m.row())
    return buf.getvalue()
