"""Federated averaging with optional poisoned clients and DP client updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .defense import DpConfig, dp_hook
from .nn import MlpModel, TrainConfig, evaluate, train
from .rng import make_rng


@dataclass
class FedConfig:
    num_clients: int = 4
    rounds: int = 10
    local_epochs: int = 1
    lr: float = 0.01
    batch_size: int = 32
    optimizer: str = "adam"
    poisoned_clients: Sequence[int] = ()
    dp: DpConfig | None = None
    partition: str = "iid"
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1 or self.rounds < 1:
            raise ValueError("need at least one client and one round")
        bad = [c for c in self.poisoned_clients if not 0 <= c < self.num_clients]
        if bad:
            raise ValueError(f"poisoned clients {bad} are not valid client ids")
        if self.partition not in ("iid", "by_class"):
            raise ValueError(f"unknown partition {self.partition!r}")


@dataclass
class FedHistory:
    accuracy: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)


def partition(dataset: Dataset, num_clients: int, rule: str, rng: np.random.Generator) -> list[Dataset]:
    """``iid``: stratified round-robin deal of shuffled rows. ``by_class``:
    rows sorted by label and cut into contiguous shards."""
    if rule == "iid":
        owner = np.empty(dataset.n, dtype=np.int64)
        offset = 0
        for c in range(dataset.num_classes):
            rows = np.flatnonzero(dataset.labels == c)
            rows = rows[rng.permutation(rows.size)]
            owner[rows] = (np.arange(rows.size) + offset) % num_clients
            offset += rows.size
        parts = [np.flatnonzero(owner == i) for i in range(num_clients)]
    elif rule == "by_class":
        order = np.argsort(dataset.labels, kind="stable")
        parts = np.array_split(order, num_clients)
    else:
        raise ValueError(f"unknown partition {rule!r}")
    if any(p.size == 0 for p in parts):
        raise ValueError("partition leaves a client without data")
    return [dataset.subset(np.sort(p)) for p in parts]


def client_local_update(global_model: MlpModel, client_data: Dataset, cfg: FedConfig,
                        rng: np.random.Generator, poisoned: bool = False) -> MlpModel:
    """Train a copy of the global model on local data; the global model is not touched.

    A poisoned client adds ``U[0,1)`` noise to every returned parameter entry.
    """
    if client_data.n == 0:
        raise ValueError("client has no data")
    local = global_model.copy()
    tc = TrainConfig(epochs=cfg.local_epochs, batch_size=cfg.batch_size, optimizer=cfg.optimizer,
                     lr=cfg.lr, seed=int(rng.integers(0, 2**31 - 1)))
    hook = dp_hook(cfg.dp, rng) if cfg.dp is not None else None
    train(local, client_data, tc, grad_hook=hook)
    if poisoned:
        for p in local.params():
            p += rng.random(p.shape)
    return local


def fedavg_aggregate(models: Sequence[MlpModel]) -> MlpModel:
    """Unweighted elementwise mean of the clients' parameters."""
    if not models:
        raise ValueError("nothing to aggregate")
    shapes = [p.shape for p in models[0].params()]
    for m in models[1:]:
        if [p.shape for p in m.params()] != shapes:
            raise ValueError("client models have mismatched shapes")
    out = models[0].copy()
    # mean of offsets from the first client: identical inputs give back exactly that input
    for i, p in enumerate(out.params()):
        p += np.mean(np.stack([m.params()[i] - p for m in models]), axis=0)
    return out


def run_federated(cfg: FedConfig, train_set: Dataset, init_model: MlpModel,
                  test_set: Dataset | None = None) -> tuple[MlpModel, FedHistory]:
    """Broadcast, train locally on every client, average; repeat ``rounds`` times.

    Per-round accuracy and loss are measured on ``test_set`` (or the training
    data when none is given).
    """
    clients = partition(train_set, cfg.num_clients, cfg.partition, make_rng(cfg.seed, "partition"))
    streams = [make_rng(cfg.seed, f"client-{i}") for i in range(cfg.num_clients)]
    poisoned = set(cfg.poisoned_clients)
    model = init_model.copy()
    history = FedHistory()
    eval_set = test_set if test_set is not None else train_set
    for _ in range(cfg.rounds):
        updates = [client_local_update(model, data, cfg, streams[i], i in poisoned)
                   for i, data in enumerate(clients)]
        model = fedavg_aggregate(updates)
        m = evaluate(model, eval_set)
        history.accuracy.append(m.accuracy)
        history.loss.append(m.mean_loss)
    return model, history
