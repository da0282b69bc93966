"""Federated training loop: local steps, pace-gated noisy averaging, broadcast."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import stable_hash
from .nn import AdamState, Batch, MlpModel, apply_adam, backward, cross_entropy, init_model, lr_schedule
from .privacy import NoiseSpec, perturb_tensor

TELEMETRY_FIELDS = ("epoch", "step", "site", "loss", "comm_event")


@dataclass
class FedConfig:
    epochs: int = 50
    steps_per_epoch: int = 60
    tau: int = 20
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    arch: str = "fed-mlp"
    lr: float = 1e-5
    lr_every: int = 20
    lr_factor: float = 0.5
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be >= 1")
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)

    def lr_at(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr, self.lr_every, self.lr_factor)


@dataclass
class SiteData:
    site_id: str
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.X) == 0:
            raise ValueError(f"site {self.site_id} has no training data")


def site_rng(seed: int, site_id: str, purpose: str) -> np.random.Generator:
    """Independent stream keyed by (seed, site, purpose); schedule-independent."""
    return np.random.default_rng([seed, stable_hash(site_id), stable_hash(purpose)])


class BatchStream:
    """Per-site mini-batches of size ceil(n / steps_per_epoch), reshuffled each epoch."""

    def __init__(self, data: SiteData, steps_per_epoch: int, rng: np.random.Generator):
        self.data = data
        self.n = len(data.X)
        self.batch_size = max(1, math.ceil(self.n / steps_per_epoch))
        self.rng = rng
        self.perm = np.arange(self.n)
        self.cursor = 0

    def start_epoch(self):
        self.perm = self.rng.permutation(self.n)
        self.cursor = 0

    def next(self) -> Batch:
        idx = self.perm[(self.cursor + np.arange(self.batch_size)) % self.n]
        self.cursor += self.batch_size
        return Batch(self.data.X[idx], self.data.y[idx])


class SiteNode:
    def __init__(self, data: SiteData, model: MlpModel, steps_per_epoch: int, seed: int):
        self.site_id = data.site_id
        self.model = model
        self.optimizer = AdamState()
        self.stream = BatchStream(data, steps_per_epoch, site_rng(seed, data.site_id, "batches"))
        self.rng = site_rng(seed, data.site_id, "dropout")
        self.noise_rng = site_rng(seed, data.site_id, "noise")


@dataclass
class GlobalServer:
    weights: dict | None = None
    rounds: int = 0
    shared_keys: list = field(default_factory=list)


def local_step(node: SiteNode) -> float:
    batch = node.stream.next()
    probs, cache = node.model.forward(batch.inputs, train=True, rng=node.rng)
    loss = cross_entropy(probs, batch.labels)
    apply_adam(node.model, node.optimizer, backward(node.model, batch, cache))
    return loss


def average_states(states: list[dict], noise: NoiseSpec, rngs, noised_keys) -> dict:
    """Unweighted mean of per-sender states; keys in ``noised_keys`` are
    perturbed by their sender before averaging."""
    keys = list(states[0])
    for s in states[1:]:
        if list(s) != keys:
            raise ValueError("senders disagree on tensor names")
        for k in keys:
            if s[k].shape != states[0][k].shape:
                raise ValueError(f"shape mismatch for {k}")
    out = {}
    for k in keys:
        total = np.zeros_like(states[0][k])
        for s, rng in zip(states, rngs):
            total = total + (perturb_tensor(s[k], noise, rng) if k in noised_keys else s[k])
        out[k] = total / len(states)
    return out


def aggregate(server: GlobalServer, nodes: list[SiteNode], noise: NoiseSpec) -> dict:
    """w_bar = mean over sites of the sender-noised weights.

    Trainable tensors are noised; BatchNorm running statistics are averaged
    as sent.
    """
    states = [n.model.state() for n in nodes]
    noised = set(nodes[0].model.params())
    server.weights = average_states(states, noise, [n.noise_rng for n in nodes], noised)
    server.rounds += 1
    server.shared_keys = list(server.weights)
    return server.weights


def broadcast(server: GlobalServer, nodes: list[SiteNode]):
    if server.weights is None:
        raise RuntimeError("nothing to broadcast before the first aggregation")
    for n in nodes:
        n.model.load_state(server.weights)


@dataclass
class FedResult:
    global_model: MlpModel | None
    local_models: dict[str, MlpModel]
    telemetry: list[dict]
    comm_events: int

    def model_for(self, site_id: str) -> MlpModel:
        return self.global_model if self.global_model is not None else self.local_models[site_id]


def run_fed(config: FedConfig, sites: list[SiteData]) -> FedResult:
    """Federated training with pace ``tau``; the pace counter resets each epoch."""
    if not sites:
        raise ValueError("need at least one site")
    d = sites[0].X.shape[1]
    base = init_model(config.arch, config.seed, in_dim=d, dropout=config.dropout)
    nodes = [SiteNode(s, base.copy(), config.steps_per_epoch, config.seed) for s in sites]
    server = GlobalServer()
    telemetry = []
    comms = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for n in nodes:
            n.optimizer.lr = lr
            n.stream.start_epoch()
        t = 0
        for step in range(config.steps_per_epoch):
            losses = [local_step(n) for n in nodes]
            t += 1
            comm = t % config.tau == 0
            if comm:
                aggregate(server, nodes, config.noise)
                broadcast(server, nodes)
                comms += 1
            for n, loss in zip(nodes, losses):
                telemetry.append({"epoch": epoch, "step": step, "site": n.site_id, "loss": loss, "comm_event": int(comm)})
    global_model = None
    if server.weights is not None:
        global_model = base.copy()
        global_model.load_state(server.weights)
    return FedResult(global_model, {n.site_id: n.model for n in nodes}, telemetry, comms)


def train_centralized(data: SiteData, config: FedConfig, arch: str | None = None) -> tuple[MlpModel, list[float]]:
    """Plain single-trainer Adam run over the same batch schedule as one site."""
    arch = arch or config.arch
    model = init_model(arch, config.seed, in_dim=data.X.shape[1], dropout=config.dropout)
    node = SiteNode(data, model, config.steps_per_epoch, config.seed)
    losses = []
    for epoch in range(config.epochs):
        node.optimizer.lr = config.lr_at(epoch)
        node.stream.start_epoch()
        for _ in range(config.steps_per_epoch):
            losses.append(local_step(node))
    return model, losses


def predict_probs(model: MlpModel, X: np.ndarray) -> np.ndarray:
    return model.forward(X, train=False)[0]


def write_telemetry(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TELEMETRY_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "loss": repr(float(r["loss"]))})
