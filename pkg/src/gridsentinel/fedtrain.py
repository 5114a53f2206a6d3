"""
Local supervised training and the federated round loop.

Clients train on their own windows and hand the server a ClientUpdate
(parameters and a window count) plus a ClientValidation (sequence-level
tallies). The server never sees telemetry or windows.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.utils.class_weight import compute_class_weight

from src.gridsentinel.encoder import (
    EncoderInputs,
    ModelParams,
    bind,
    encode_batch,
    forward,
    init_params,
    input_dims_of,
)
from src.gridsentinel.errors import AggregationError, ConfigError, NumericError, PreconditionError
from src.gridsentinel.evaluation import Confusion, check_rule_window, decide_sequences, decide_timesteps
from src.gridsentinel.numerics import (
    AdamOptimizer,
    Graph,
    add,
    clip,
    clip_by_global_norm,
    log,
    mul,
    scale,
    sub,
    sum_all,
    topk_mean_rows,
)

logger = logging.getLogger("gridsentinel.fedtrain")

POOLED_CLIENT = 10_000


# ---------- losses ----------

def class_weights(labels):
    """Inverse-frequency weights T / (2 T_c); an absent class gets weight 1."""
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise ConfigError("class weights need at least one labeled timestep")
    total = labels.size
    attacks = int(np.count_nonzero(labels == 1))
    normals = total - attacks
    if attacks == 0 or normals == 0:
        logger.warning("class %d absent from %d training timesteps; using unit class weights",
                       1 if attacks == 0 else 0, total)
        return 1.0, 1.0
    w0, w1 = compute_class_weight("balanced", classes=np.array([0, 1]), y=labels.astype(np.int64))
    return float(w0), float(w1)


def _on_graph(values):
    """Wrap plain arrays on a throwaway graph so the losses also work as formulas."""
    if hasattr(values, "graph"):
        return values, False
    return Graph().constant(values), True


def _result(tensor, wrapped):
    return float(tensor.values) if wrapped else tensor


def _binary_cross_entropy(p, y, w0, w1, eps):
    graph = p.graph
    y = np.asarray(y, dtype=np.float64).reshape(p.values.shape)
    pc = clip(p, eps, 1.0 - eps)
    ones = graph.constant(np.ones(p.values.shape))
    terms = add(mul(graph.constant(w1 * y), log(pc)), mul(graph.constant(w0 * (1.0 - y)), log(sub(ones, pc))))
    return scale(sum_all(terms), -1.0 / p.values.size)


def timestep_loss(p, y, w0=1.0, w1=1.0, eps=1e-12):
    """Class-weighted cross-entropy averaged over every (window, timestep)."""
    p, wrapped = _on_graph(p)
    if np.shape(y) != p.values.shape:
        raise ValueError(f"labels {np.shape(y)} do not match probabilities {p.values.shape}")
    return _result(_binary_cross_entropy(p, y, w0, w1, eps), wrapped)


def topk_pool(p, k):
    """Mean of the k largest probabilities of one window."""
    p = np.asarray(p, dtype=np.float64)
    if not 1 <= k <= p.size:
        raise ValueError(f"k must be in [1, {p.size}], got {k}")
    order = np.argsort(-p, kind="stable")[:k]
    return float(p[order].mean())


def sequence_loss(p_seq, y_seq, eps=1e-12):
    """Mean binary cross-entropy of pooled window scores."""
    p_seq, wrapped = _on_graph(p_seq)
    return _result(_binary_cross_entropy(p_seq, y_seq, 1.0, 1.0, eps), wrapped)


def supervised_loss(probs, labels, weights, loss_cfg):
    """alpha * timestep loss + lambda_seq * pooled sequence loss on a (B, W) batch."""
    labels = np.asarray(labels)
    w0, w1 = weights
    loss = scale(timestep_loss(probs, labels, w0, w1, loss_cfg.eps), loss_cfg.alpha)
    if loss_cfg.lambda_seq > 0:
        pooled = topk_mean_rows(probs, loss_cfg.top_k(labels.shape[1]))
        loss = add(loss, scale(sequence_loss(pooled, labels.max(axis=1), loss_cfg.eps), loss_cfg.lambda_seq))
    return loss


def proximal_term(graph, weights, anchor, mu):
    """(mu/2) ||theta - anchor||^2, or None when mu is 0."""
    if mu <= 0:
        return None
    total = None
    for name, w in weights.items():
        diff = sub(w, graph.constant(anchor[name]))
        term = sum_all(mul(diff, diff))
        total = term if total is None else add(total, term)
    return scale(total, mu / 2.0)


def weight_decay_term(weights, coefficient):
    """coefficient * ||theta||^2, or None when the coefficient is 0."""
    if coefficient <= 0:
        return None
    total = None
    for w in weights.values():
        term = sum_all(mul(w, w))
        total = term if total is None else add(total, term)
    return scale(total, coefficient)


def objective(graph, weights, inputs, labels, class_w, model_cfg, loss_cfg, anchor=None, mu=0.0):
    """Full local objective; returns (total, supervised) tensors."""
    _, probs = forward(graph, weights, inputs, model_cfg)
    supervised = supervised_loss(probs, labels, class_w, loss_cfg)
    total = supervised
    with graph.scope("regularizer"):
        for term in (weight_decay_term(weights, loss_cfg.weight_decay),
                     proximal_term(graph, weights, anchor, mu) if anchor is not None else None):
            if term is not None:
                total = add(total, term)
    return total, supervised


# ---------- local training ----------

@dataclass
class ClientUpdate:
    client: int
    params: ModelParams
    n_samples: int
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)

    @property
    def mean_loss(self):
        return float(np.mean(self.losses)) if self.losses else float("nan")

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else float("nan")

    def grad_norm_stats(self, clip_norm=None):
        norms = np.asarray(self.grad_norms)
        if not norms.size:
            return {"mean": 0.0, "max": 0.0, "clipped": 0.0}
        clipped = float(np.mean(norms > clip_norm)) if clip_norm else 0.0
        return {"mean": float(norms.mean()), "max": float(norms.max()), "clipped": clipped}


@dataclass
class ClientValidation:
    client: int
    sequence: Confusion
    windows: int

    @property
    def accuracy(self):
        return self.sequence.accuracy


def _batches(groups, batch_size, rng):
    """Minibatches drawn within each group (windows sharing one star), in shuffled order."""
    batches = []
    for windows in groups:
        order = rng.permutation(len(windows))
        for offset in range(0, len(windows), batch_size):
            batches.append([windows[i] for i in order[offset:offset + batch_size]])
    return [batches[i] for i in rng.permutation(len(batches))]


def local_train(global_params, groups, class_w, loss_cfg, fed_cfg, model_cfg, mu=0.0, rng=None, client=-1):
    """Epochs of clipped Adam on the regularized local objective.

    groups is a list of window lists; every batch comes from a single group so
    its windows share the neighbor count.
    """
    n_samples = sum(len(g) for g in groups)
    if n_samples < 1:
        raise PreconditionError(f"client {client} has no training windows")
    rng = rng or np.random.default_rng(fed_cfg.seed)
    params = global_params.copy()
    anchor = global_params if mu > 0 else None
    optimizer = AdamOptimizer(lr=fed_cfg.lr)
    update = ClientUpdate(client, params, n_samples)

    for epoch in range(fed_cfg.local_epochs):
        for step, batch in enumerate(_batches(groups, fed_cfg.batch_size, rng)):
            inputs = EncoderInputs.from_samples(batch)
            labels = np.stack([s.labels for s in batch])
            graph = Graph(training=True, seed=int(rng.integers(2**32)))
            try:
                weights = bind(graph, params)
                total, _ = objective(graph, weights, inputs, labels, class_w, model_cfg, loss_cfg, anchor, mu)
                graph.backward(total)
            except NumericError as e:
                raise NumericError(
                    f"client {client} epoch {epoch} batch {step}: {e.args[0]}; "
                    f"parameter norm {params.global_norm():.4g}"
                ) from e
            grads = {name: graph.grad(w) for name, w in weights.items()}
            grads, norm = clip_by_global_norm(grads, loss_cfg.clip_norm)
            params = ModelParams(optimizer.step(params, grads))
            update.losses.append(float(total.values))
            update.grad_norms.append(norm)
        logger.debug("client %d epoch %d: mean loss %.5f", client, epoch, np.mean(update.losses))

    update.params = params
    return update


def validate(params, windows, model_cfg, rule, client=-1, batch_size=256):
    """Sequence-level tallies of the rule on a client's validation windows."""
    confusion = Confusion()
    for offset in range(0, len(windows), batch_size):
        chunk = windows[offset:offset + batch_size]
        probs = encode_batch(chunk, params, model_cfg, mode="eval").probs
        check_rule_window(rule.m, probs.shape[1])
        flags = decide_sequences(decide_timesteps(probs, rule.tau), rule.m, rule.mode)
        truth = np.array([s.sequence_label for s in chunk])
        confusion = confusion + Confusion.from_arrays(flags, truth)
    return ClientValidation(client, confusion, len(windows))


class FederatedClient:
    """One wireless node; its windows never leave this object."""

    def __init__(self, windows, config):
        self.node = windows.node
        self._windows = windows
        self._config = config
        self.class_weights = class_weights(np.concatenate([s.labels for s in windows.train]))

    @property
    def n_train(self):
        return len(self._windows.train)

    def local_train(self, global_params, round_index):
        cfg = self._config
        rng = np.random.default_rng(np.random.SeedSequence([cfg.fed.seed, round_index, self.node]))
        return local_train(global_params, [self._windows.train], self.class_weights, cfg.loss, cfg.fed,
                           cfg.model, mu=cfg.fed.proximal_mu, rng=rng, client=self.node)

    def validate(self, params):
        return validate(params, self._windows.val, self._config.model, self._config.rule, client=self.node)


class CentralizedTrainer:
    """Pooled-data baseline: one trainer, global class weights, same model and losses."""

    node = POOLED_CLIENT

    def __init__(self, clients, config):
        self._clients = clients
        self._config = config
        self.class_weights = class_weights(np.concatenate([s.labels for c in clients.values() for s in c.train]))

    @property
    def n_train(self):
        return sum(len(c.train) for c in self._clients.values())

    def local_train(self, params, round_index):
        cfg = self._config
        rng = np.random.default_rng(np.random.SeedSequence([cfg.fed.seed, round_index, POOLED_CLIENT]))
        groups = [self._clients[n].train for n in sorted(self._clients)]
        return local_train(params, groups, self.class_weights, cfg.loss, cfg.fed, cfg.model,
                           mu=0.0, rng=rng, client=POOLED_CLIENT)

    def validate(self, params):
        cfg = self._config
        return [validate(params, self._clients[n].val, cfg.model, cfg.rule, client=n) for n in sorted(self._clients)]


# ---------- server ----------

def aggregate(updates):
    """Sample-weighted mean of client parameters, reduced in ascending client order."""
    if not updates:
        raise AggregationError("aggregate needs at least one client update")
    updates = sorted(updates, key=lambda u: u.client)
    manifest = updates[0].params.manifest()
    for u in updates:
        if u.params.manifest() != manifest:
            raise AggregationError(f"client {u.client} parameter manifest differs from client {updates[0].client}")
        if u.n_samples < 1:
            raise AggregationError(f"client {u.client} reported {u.n_samples} samples")
    first = updates[0].params
    if all(all(np.array_equal(u.params[name], first[name]) for name in first) for u in updates[1:]):
        return first.copy()
    total = float(sum(u.n_samples for u in updates))
    weighted = ModelParams.linear_combination([u.params for u in updates], [float(u.n_samples) for u in updates])
    return ModelParams({name: value / total for name, value in weighted.items()})


@dataclass
class RoundRecord:
    round: int
    client_losses: dict
    client_samples: dict
    grad_norms: dict
    validation: Confusion
    val_accuracy: float
    best_accuracy: float
    best_round: int
    wall_time: float
    params: ModelParams = field(default=None, repr=False, compare=False)  # aggregated model after this round

    def to_dict(self):
        return {
            "round": self.round,
            "client_losses": {str(k): v for k, v in sorted(self.client_losses.items())},
            "client_samples": {str(k): v for k, v in sorted(self.client_samples.items())},
            "grad_norms": {str(k): v for k, v in sorted(self.grad_norms.items())},
            "val_seq": {"tp": self.validation.tp, "fp": self.validation.fp,
                        "tn": self.validation.tn, "fn": self.validation.fn},
            "val_seq_accuracy": self.val_accuracy,
            "best_val_seq_accuracy": self.best_accuracy,
            "best_round": self.best_round,
            "wall_time_s": self.wall_time,
        }


class FederatedServer:
    """Holds the global model and picks the best round by pooled validation accuracy."""

    def __init__(self, params):
        self.params = params
        self.best_params = params.copy()
        self.best_accuracy = -1.0
        self.best_round = 0
        self.log = []

    def aggregate(self, updates):
        self.params = aggregate(updates)
        return self.params

    def select(self, round_index, validations, updates, clip_norm, started):
        pooled = Confusion()
        for v in sorted(validations, key=lambda v: v.client):
            pooled = pooled + v.sequence
        accuracy = pooled.accuracy
        if accuracy > self.best_accuracy:
            self.best_accuracy, self.best_round = accuracy, round_index
            self.best_params = self.params.copy()
        record = RoundRecord(
            round=round_index,
            client_losses={u.client: u.mean_loss for u in updates},
            client_samples={u.client: u.n_samples for u in updates},
            grad_norms={u.client: u.grad_norm_stats(clip_norm) for u in updates},
            validation=pooled,
            val_accuracy=accuracy,
            best_accuracy=self.best_accuracy,
            best_round=self.best_round,
            wall_time=time.perf_counter() - started,
            params=self.params,
        )
        self.log.append(record)
        return record


@dataclass
class TrainingResult:
    best_params: ModelParams
    final_params: ModelParams
    best_round: int
    best_accuracy: float
    log: list


def _check_clients(clients, window):
    if not clients:
        raise PreconditionError("no wireless clients to train")
    for node, c in sorted(clients.items()):
        if not c.train or not c.val:
            raise PreconditionError(
                f"client {node} has {len(c.train)} training and {len(c.val)} validation windows of length {window}; "
                "increase gen.timesteps or shorten features.window"
            )


def _train_clients(participants, params, round_index, workers):
    if workers > 1 and len(participants) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {p.node: pool.submit(p.local_train, params, round_index) for p in participants}
            return [futures[node].result() for node in sorted(futures)]
    return [p.local_train(params, round_index) for p in sorted(participants, key=lambda p: p.node)]


def run_rounds(clients, config, init=None, on_round=None):
    """Broadcast, train every client, aggregate, validate; keep the best round."""
    _check_clients(clients, config.features.window)
    check_rule_window(config.rule.m, config.features.window)
    first = clients[min(clients)]
    params = init if init is not None else init_params(config.model, input_dims_of(first.train))
    server = FederatedServer(params)

    centralized = config.fed.mode == "centralized"
    if centralized:
        participants = [CentralizedTrainer(clients, config)]
    else:
        participants = [FederatedClient(clients[n], config) for n in sorted(clients)]
    logger.info("training %s over %d rounds with %d participant(s), %s, mu=%g",
                config.model.arch, config.fed.rounds, len(participants),
                config.fed.mode if centralized else config.fed.algorithm, config.fed.proximal_mu)

    for round_index in range(1, config.fed.rounds + 1):
        started = time.perf_counter()
        updates = _train_clients(participants, server.params, round_index, config.fed.workers)
        server.aggregate(updates)
        if centralized:
            validations = participants[0].validate(server.params)
        else:
            validations = [p.validate(server.params) for p in participants]
        record = server.select(round_index, validations, updates, config.loss.clip_norm, started)
        logger.info("round %d/%d: mean loss %.5f, val seq acc %.4f (best %.4f @ %d), %.1fs",
                    round_index, config.fed.rounds, np.mean([u.mean_loss for u in updates]),
                    record.val_accuracy, record.best_accuracy, record.best_round, record.wall_time)
        if on_round is not None:
            on_round(record)

    return TrainingResult(server.best_params, server.params, server.best_round, server.best_accuracy, server.log)
