"""Federated training: prototype-plus-distillation protocol and baseline strategies.

Every client holds a frozen teacher (when the strategy distils) and a student.
Each round, available clients train their student locally and upload
per-class prototypes; the server aggregates prototypes every round and, for
the ``efpkd`` strategy, aggregates student models only in the last round.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics as M
from .data import EncodedDataset, PartitionPlan
from .nn import (
    ModelParams,
    NetworkSpec,
    OptimizerState,
    backward,
    forward,
    init_params,
    loss_kd,
    loss_supervised,
    optimizer_step,
    student_spec,
    teacher_spec,
)

log = logging.getLogger(__name__)

STRATEGIES = ("efpkd", "fedavg", "fedprox", "fedproto", "fedkd", "independent-cnn", "independent-kd")
USES_TEACHER = {"efpkd", "fedkd", "independent-kd"}
USES_PROTOTYPES = {"efpkd", "fedproto"}
MODEL_EVERY_ROUND = {"fedavg", "fedprox", "fedkd"}

# rng stream purposes
_AVAIL, _STUDENT_INIT, _TEACHER_INIT, _TEACHER_SHUFFLE, _STUDENT_SHUFFLE = range(5)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, purpose, ...); order of use never matters."""
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


class AggregationError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class RoundConfig:
    strategy: str = "efpkd"
    rounds: int = 10
    local_epochs: int = 5
    batch_size: int = 32
    psi: float = 0.1
    gamma: float = 1.0
    zeta: float = 0.5
    student_lr: float = 1e-4
    lr_decay: float = 0.97
    teacher_lr: float = 1e-3
    teacher_epochs: int = 5
    availability_probability: float = 0.9
    distance: str = "l2sq"
    proto_mean_normalized: bool = False
    fedprox_mu: float = 0.01
    force_model_aggregation: bool = False
    student_conv: tuple[int, ...] = (64, 128)
    student_hidden: int = 64
    teacher_conv: tuple[int, ...] = (512, 1024, 2048)
    teacher_hidden: int = 512
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if not 0 <= self.psi <= 1:
            raise ValueError("psi must be in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.zeta > 0:
            raise ValueError("zeta must be > 0")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.availability_probability <= 1:
            raise ValueError("availability probability must be in (0, 1]")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {sorted(DISTANCES)}")
        if self.batch_size < 1 or self.local_epochs < 0 or self.teacher_epochs < 0:
            raise ValueError("batch size must be >= 1 and epoch counts >= 0")


# --------------------------------------------------------------------------
# Prototypes
# --------------------------------------------------------------------------


@dataclass
class PrototypeSet:
    vectors: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    client_id: int = -1

    def __bool__(self) -> bool:
        return bool(self.vectors)

    @property
    def nbytes(self) -> int:
        # float64 vector plus an int64 class id and count per entry
        return sum(v.size * 8 + 16 for v in self.vectors.values())


def _sq_l2(d: np.ndarray):
    return float(d @ d), 2.0 * d


def _l2(d: np.ndarray):
    n = float(np.sqrt(d @ d))
    return n, (d / n if n > 0 else np.zeros_like(d))


def _l1(d: np.ndarray):
    return float(np.abs(d).sum()), np.sign(d)


DISTANCES = {"l2sq": _sq_l2, "l2": _l2, "l1": _l1}


def distance(a: np.ndarray, b: np.ndarray, metric: str = "l2sq") -> float:
    return DISTANCES[metric](np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))[0]


def embed(params: ModelParams, X: np.ndarray, batch: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Infer-mode logits and embeddings for a feature matrix ``[N, d]``."""
    spec = params.spec
    logits, embs = [], []
    for start in range(0, X.shape[0], batch):
        lg, em, _ = forward(spec, params, X[start : start + batch, None, :], "infer")
        logits.append(lg)
        embs.append(em)
    if not logits:
        return np.zeros((0, spec.n_classes)), np.zeros((0, spec.layers[-1].in_units))
    return np.concatenate(logits), np.concatenate(embs)


def predict(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return embed(params, X)[0].argmax(axis=1)


def prototypes_from_embeddings(emb: np.ndarray, labels: np.ndarray, alpha: int = 1, client_id: int = -1) -> PrototypeSet:
    if alpha == 0:
        return PrototypeSet(client_id=client_id)
    out = PrototypeSet(client_id=client_id)
    for k in np.unique(labels):
        rows = labels == k
        out.vectors[int(k)] = alpha * emb[rows].mean(axis=0)
        out.counts[int(k)] = int(rows.sum())
    return out


def compute_prototypes(params: ModelParams, X: np.ndarray, y: np.ndarray, alpha: int = 1, client_id: int = -1) -> PrototypeSet:
    """Per-class mean embedding of a shard (infer mode); empty when ``alpha == 0``."""
    if alpha == 0:
        return PrototypeSet(client_id=client_id)
    _, emb = embed(params, X)
    return prototypes_from_embeddings(emb, y, alpha, client_id)


def regularization_term(local: PrototypeSet, global_: PrototypeSet, metric: str = "l2sq"):
    """Summed distance over classes held by both sets, and d/d(local vector) per class."""
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    for k in sorted(set(local.vectors) & set(global_.vectors)):
        value, grad = DISTANCES[metric](local.vectors[k] - global_.vectors[k])
        total += value
        grads[k] = grad
    return total, grads


def batch_regularization(emb: np.ndarray, labels: np.ndarray, global_: PrototypeSet, metric: str = "l2sq"):
    """Regularisation on the batch's own class means; returns value and dL/d(embedding)."""
    local = prototypes_from_embeddings(emb, labels)
    value, grads = regularization_term(local, global_, metric)
    g = np.zeros_like(emb)
    for k, gk in grads.items():
        rows = labels == k
        g[rows] = gk / local.counts[k]
    return value, g


def local_loss(entropy: float, kd: float, reg: float, psi: float, gamma: float) -> float:
    return psi * entropy + (1 - psi) * kd + gamma * reg


def aggregate_prototypes(client_sets: Sequence[PrototypeSet], alphas: Sequence[int] | None = None,
                         mean_normalized: bool = False) -> PrototypeSet:
    """Server-side prototype aggregation.

    For class k with contributor set M_k, each contributor is weighted by its
    share of the class count and the sum is additionally divided by |M_k|.
    ``mean_normalized`` drops that extra division (plain weighted mean).
    """
    if alphas is None:
        alphas = [1] * len(client_sets)
    order = sorted(range(len(client_sets)), key=lambda i: client_sets[i].client_id)
    sets = [(client_sets[i], alphas[i]) for i in order if alphas[i] and client_sets[i]]
    if not sets:
        raise AggregationError("no contributing clients")
    out = PrototypeSet()
    for k in sorted({k for s, _ in sets for k in s.vectors}):
        members = [(s, a) for s, a in sets if k in s.vectors]
        total = sum(s.counts[k] for s, _ in members)
        acc = np.zeros_like(members[0][0].vectors[k])
        for s, a in members:
            acc = acc + (a * s.counts[k] / total) * s.vectors[k]
        out.vectors[k] = acc if mean_normalized else acc / len(members)
        out.counts[k] = total
    return out


def aggregation_weights(data_sizes: Sequence[int], alphas: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(data_sizes, dtype=np.float64) * np.asarray(alphas, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise AggregationError("no participating clients with data")
    return sizes / total


def aggregate_models(student_params: Sequence[ModelParams], data_sizes: Sequence[int], alphas: Sequence[int],
                     ids: Sequence[int] | None = None) -> ModelParams:
    """Data-size weighted average of participating clients' parameters."""
    if not student_params:
        raise AggregationError("no models to aggregate")
    spec = student_params[0].spec
    if any(p.spec != spec for p in student_params):
        raise AggregationError("clients use different network structures")
    weights = aggregation_weights(data_sizes, alphas)
    ids = list(range(len(student_params))) if ids is None else list(ids)
    acc = np.zeros(student_params[0].total_count)
    for i in sorted(range(len(student_params)), key=lambda i: ids[i]):
        if weights[i] != 0:
            acc = acc + weights[i] * student_params[i].to_vector()
    out = student_params[0].copy()
    out.load_vector(acc)
    return out


def sample_availability(n_clients: int, probability: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli flags, redrawn until at least one client is available."""
    if not 0 < probability <= 1:
        raise ValueError("probability must be in (0, 1]")
    while True:
        flags = (rng.random(n_clients) < probability).astype(np.int64)
        if flags.any():
            return flags


# --------------------------------------------------------------------------
# Clients
# --------------------------------------------------------------------------


@dataclass
class ClientState:
    id: int
    X: np.ndarray
    y: np.ndarray
    student: ModelParams
    optimizer: OptimizerState
    teacher: ModelParams | None = None
    teacher_logits: np.ndarray | None = None
    prototypes: PrototypeSet = field(default_factory=PrototypeSet)
    alpha: int = 1
    sl_loss: float | None = None

    @property
    def size(self) -> int:
        return self.y.shape[0]

    def class_counts(self) -> dict[int, int]:
        ks, ns = np.unique(self.y, return_counts=True)
        return {int(k): int(n) for k, n in zip(ks, ns)}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def pretrain_teacher(client: ClientState, spec: NetworkSpec, cfg: RoundConfig, mode: str) -> ModelParams:
    """Supervised-only Adam training of the client's teacher, then freeze it."""
    if client.size == 0:
        raise ValueError(f"client {client.id} has an empty shard")
    params = init_params(spec, stream(cfg.seed, _TEACHER_INIT, client.id))
    opt = OptimizerState("adam", cfg.teacher_lr)
    rng = stream(cfg.seed, _TEACHER_SHUFFLE, client.id)
    for epoch in range(cfg.teacher_epochs):
        for idx in _batches(client.size, cfg.batch_size, rng):
            logits, _, cache = forward(spec, params, client.X[idx, None, :], "train")
            loss, g = loss_supervised(logits, client.y[idx], mode)
            if not np.isfinite(loss):
                raise DivergenceError(f"teacher of client {client.id} diverged in epoch {epoch + 1}")
            optimizer_step(params, backward(cache, g), opt)
    params.frozen = True
    client.teacher = params
    client.teacher_logits = embed(params, client.X)[0]
    return params


@dataclass
class ClientUpdate:
    client_id: int
    prototypes: PrototypeSet
    params: ModelParams | None
    epoch_losses: list[float]
    components: dict[str, float]


def client_update(
    client: ClientState,
    global_prototypes: PrototypeSet,
    cfg: RoundConfig,
    round_index: int,
    is_final_round: bool,
    mode: str,
    global_model: ModelParams | None = None,
) -> ClientUpdate:
    """Local epochs on the client's shard, then prototypes (and the model on the last round)."""
    if client.alpha != 1:
        raise ValueError(f"client {client.id} is not available this round")
    strategy = cfg.strategy
    params = client.student
    spec = params.spec
    opt = client.optimizer
    opt.round_index = round_index
    distil = strategy in USES_TEACHER
    proto = strategy in USES_PROTOTYPES
    w_ce = cfg.psi if distil else 1.0
    w_kd = 1.0 - cfg.psi if distil else 0.0
    w_reg = cfg.gamma if (proto and global_prototypes) else 0.0
    anchor = global_model.to_vector() if strategy == "fedprox" and global_model is not None else None

    rng = stream(cfg.seed, _STUDENT_SHUFFLE, client.id, round_index)
    epoch_losses: list[float] = []
    for epoch in range(cfg.local_epochs):
        seen = 0
        running = 0.0
        for idx in _batches(client.size, cfg.batch_size, rng):
            logits, emb, cache = forward(spec, params, client.X[idx, None, :], "train")
            y = client.y[idx]
            l_ce, g_ce = loss_supervised(logits, y, mode)
            loss = w_ce * l_ce
            g = g_ce if w_ce == 1.0 else w_ce * g_ce
            if w_kd:
                l_kd, g_kd = loss_kd(client.teacher_logits[idx], logits, cfg.zeta, client.alpha)
                loss += w_kd * l_kd
                g = g + w_kd * g_kd
            emb_grad = None
            if w_reg:
                l_r, g_r = batch_regularization(emb, y, global_prototypes, cfg.distance)
                loss += w_reg * l_r
                emb_grad = w_reg * g_r
            grads = backward(cache, g, emb_grad)
            if anchor is not None:
                loss += _add_proximal(params, grads, anchor, cfg.fedprox_mu)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"client {client.id}: non-finite loss in round {round_index}, epoch {epoch + 1}"
                )
            optimizer_step(params, grads, opt)
            running += loss * len(idx)
            seen += len(idx)
        epoch_losses.append(running / seen)

    logits, emb = embed(params, client.X)
    client.prototypes = prototypes_from_embeddings(emb, client.y, client.alpha, client.id) if proto else PrototypeSet(client_id=client.id)
    l_ce, _ = loss_supervised(logits, client.y, mode)
    components = {"entropy": l_ce}
    sl = w_ce * l_ce
    if distil and client.teacher_logits is not None:
        l_kd, _ = loss_kd(client.teacher_logits, logits, cfg.zeta, client.alpha)
        components["kd"] = l_kd
        sl += w_kd * l_kd
    client.sl_loss = sl
    components["supervised"] = sl
    if proto and global_prototypes:
        components["reg"] = regularization_term(client.prototypes, global_prototypes, cfg.distance)[0]
    return ClientUpdate(client.id, client.prototypes, params if is_final_round else None, epoch_losses, components)


def _add_proximal(params: ModelParams, grads, anchor: np.ndarray, mu: float) -> float:
    value = 0.0
    pos = 0
    for i, name in params.names():
        arr = params.blocks[i][name]
        ref = anchor[pos : pos + arr.size].reshape(arr.shape)
        pos += arr.size
        if name in grads[i]:
            diff = arr - ref
            grads[i][name] = grads[i][name] + mu * diff
            value += 0.5 * mu * float((diff * diff).sum())
    return value


def global_objective_value(clients: Sequence[ClientState], global_prototypes: PrototypeSet, cfg: RoundConfig) -> float:
    """Weighted supervised loss plus gamma-weighted prototype distances (evaluation only)."""
    part = [c for c in clients if c.alpha]
    U = sum(c.size for c in part)
    if U == 0:
        return 0.0
    value = sum(c.alpha * c.size / U * (c.sl_loss or 0.0) for c in part)
    if cfg.gamma:
        for k, g in global_prototypes.vectors.items():
            members = [c for c in part if k in c.prototypes.vectors]
            U_k = sum(c.prototypes.counts[k] for c in members)
            for c in members:
                value += cfg.gamma * c.alpha * c.prototypes.counts[k] / U_k * distance(g, c.prototypes.vectors[k], cfg.distance)
    return float(value)


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------


@dataclass
class GlobalState:
    prototypes: PrototypeSet = field(default_factory=PrototypeSet)
    model: ModelParams | None = None
    round: int = 0
    seed: int = 0


@dataclass
class RoundReport:
    round: int
    alphas: list[int]
    lr: float
    train_loss: dict[int, list[float]]
    components: dict[int, dict[str, float]]
    ledger: dict[str, int]
    global_model_present: bool
    objective: float | None = None
    client_metrics: dict[int, dict] = field(default_factory=dict)
    averaged: dict = field(default_factory=dict)
    pooled: dict = field(default_factory=dict)


@dataclass
class TrainingResult:
    state: GlobalState
    reports: list[RoundReport]
    clients: list[ClientState]
    student_spec: NetworkSpec


def build_student_spec(n_features: int, n_classes: int, cfg: RoundConfig) -> NetworkSpec:
    return student_spec(n_features, n_classes, tuple(cfg.student_conv), cfg.student_hidden)


def build_teacher_spec(n_features: int, n_classes: int, cfg: RoundConfig) -> NetworkSpec:
    return teacher_spec(n_features, n_classes, tuple(cfg.teacher_conv), cfg.teacher_hidden)


def evaluate_clients(models: dict[int, ModelParams], test: EncodedDataset, shards: Sequence[np.ndarray],
                     alphas: Sequence[int]) -> tuple[dict[int, dict], dict, dict, np.ndarray]:
    """Each client scores its own test shard with its model; returns per-client, averaged, pooled metrics."""
    pred = np.full(len(test), -1, dtype=np.int64)
    per_client: dict[int, dict] = {}
    users: dict[int, int] = {}
    for model in models.values():
        users[id(model)] = users.get(id(model), 0) + 1
    full: dict[int, np.ndarray] = {}
    for cid, rows in enumerate(shards):
        model = models[cid]
        if users[id(model)] > 1:
            if id(model) not in full:
                full[id(model)] = predict(model, test.features)
            p = full[id(model)][rows]
        else:
            p = predict(model, test.features[rows])
        pred[rows] = p
        per_client[cid] = M.evaluate(p, test.labels[rows], test.mode, test.n_classes, test.normal_index)
    avg = M.averaged_metrics([per_client[c] for c in range(len(shards))], alphas)
    covered = pred >= 0
    pooled = M.evaluate(pred[covered], test.labels[covered], test.mode, test.n_classes, test.normal_index)
    return per_client, avg, pooled, pred


def run_training(
    train: EncodedDataset,
    partition: PartitionPlan,
    cfg: RoundConfig,
    test: EncodedDataset | None = None,
    test_shards: Sequence[np.ndarray] | None = None,
) -> TrainingResult:
    cfg.validate()
    mode, K, d = train.mode, train.n_classes, train.features.shape[1]
    sspec = build_student_spec(d, K, cfg)
    init = init_params(sspec, stream(cfg.seed, _STUDENT_INIT))
    clients = [
        ClientState(cid, train.features[rows], train.labels[rows], init.copy(),
                    OptimizerState("sgd", cfg.student_lr, cfg.lr_decay))
        for cid, rows in enumerate(partition.client_shards)
    ]
    if cfg.strategy in USES_TEACHER and (1 - cfg.psi) != 0:
        tspec = build_teacher_spec(d, K, cfg)
        for c in clients:
            pretrain_teacher(c, tspec, cfg, mode)
            log.debug("teacher of client %d ready", c.id)

    state = GlobalState(seed=cfg.seed)
    global_model = init.copy() if cfg.strategy in MODEL_EVERY_ROUND or cfg.force_model_aggregation else None
    model_bytes = init.total_count * 8
    reports: list[RoundReport] = []
    aggregate_each_round = cfg.strategy in MODEL_EVERY_ROUND or cfg.force_model_aggregation

    for q in range(1, cfg.rounds + 1):
        final = q == cfg.rounds
        alphas = sample_availability(len(clients), cfg.availability_probability, stream(cfg.seed, _AVAIL, q))
        ledger = {"prototype_bytes_down": 0, "prototype_bytes_up": 0, "model_bytes_down": 0, "model_bytes_up": 0}
        updates: list[ClientUpdate] = []
        send_model = aggregate_each_round or (cfg.strategy == "efpkd" and final)
        for c, a in zip(clients, alphas):
            c.alpha = int(a)
            if not a:
                continue
            if aggregate_each_round and global_model is not None:
                c.student.load_vector(global_model.to_vector())
                ledger["model_bytes_down"] += model_bytes
            if cfg.strategy in USES_PROTOTYPES:
                ledger["prototype_bytes_down"] += state.prototypes.nbytes
            up = client_update(c, state.prototypes, cfg, q, send_model, mode, global_model)
            updates.append(up)
            if cfg.strategy in USES_PROTOTYPES:
                ledger["prototype_bytes_up"] += up.prototypes.nbytes
            if up.params is not None:
                ledger["model_bytes_up"] += model_bytes

        if cfg.strategy in USES_PROTOTYPES:
            state.prototypes = aggregate_prototypes([u.prototypes for u in updates], None, cfg.proto_mean_normalized)
        if send_model:
            models = [u.params for u in updates]
            sizes = [clients[u.client_id].size for u in updates]
            global_model = aggregate_models(models, sizes, [1] * len(updates), [u.client_id for u in updates])
            state.model = global_model
        state.round = q

        report = RoundReport(
            round=q,
            alphas=[int(a) for a in alphas],
            lr=cfg.student_lr * cfg.lr_decay ** (q - 1),
            train_loss={u.client_id: u.epoch_losses for u in updates},
            components={u.client_id: u.components for u in updates},
            ledger=ledger,
            global_model_present=state.model is not None,
            objective=global_objective_value(clients, state.prototypes, cfg),
        )
        if test is not None and test_shards is not None:
            models = {c.id: (state.model if state.model is not None else c.student) for c in clients}
            report.client_metrics, report.averaged, report.pooled, _ = evaluate_clients(
                models, test, test_shards, report.alphas)
        reports.append(report)
        log.info("%s round %d/%d: pooled accuracy %s", cfg.strategy, q, cfg.rounds,
                 report.pooled.get("accuracy") if report.pooled else "n/a")

    return TrainingResult(state, reports, clients, sspec)
