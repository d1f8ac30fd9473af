# Crab orchestrator module

# Description: Simulated federated training. Every round each client trains
#              locally from the current global model, malicious uploads go
#              through the adversary hook, the server averages the uploads
#              with FedAvg weights and feeds the round to the history store.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional

import numpy as np

from .adversary import AttackConfig
from .error_handler import ContractViolationError, EmptyInputError
from .logging_handler import log_obj
from .numerics import (Dataset, LocalTrainConfig, ModelArch, ParamVector,
                       check_finite, derive_seed, init_model, local_train,
                       loss)

if TYPE_CHECKING:
    from .history_store import HistoryStore, StorageConfig

AdversaryHook = Callable[[int, int, ParamVector], ParamVector]

INIT_STREAM = 0x696e


def no_attack(client_id, t, update):
    return update


@dataclass(frozen=True)
class FlConfig:
    """
    Federated training settings.

    Attributes:
        num_clients(int): C, clients are numbered 1..C.
        rounds(int): T global rounds.
        local(LocalTrainConfig): Local SGD settings (seed is overridden per
                                 client and round).
        arch(ModelArch): Global model architecture.
        malicious_ids(frozenset): C_u, unknown to the server during training.
        attack(AttackConfig): Attack run by the malicious clients.
        storage(StorageConfig): Selective storage settings.
        master_seed(int): Root of every random stream.
        workers(int): Threads used for per-client local training.
    """
    num_clients: int
    rounds: int
    local: LocalTrainConfig
    arch: ModelArch
    malicious_ids: frozenset = frozenset()
    attack: AttackConfig = field(default_factory=AttackConfig)
    storage: Optional["StorageConfig"] = None
    master_seed: int = 0
    workers: int = 1

    def validate(self):
        if self.num_clients < 1 or self.rounds < 1 or self.workers < 1:
            raise ContractViolationError(
                "num_clients, rounds and workers must be positive")
        if len(self.malicious_ids) >= self.num_clients:
            raise ContractViolationError(
                f"{len(self.malicious_ids)} malicious clients out of "
                f"{self.num_clients}: at least one client must be benign")
        outside = [c for c in self.malicious_ids
                   if not 1 <= c <= self.num_clients]
        if outside:
            raise ContractViolationError(
                f"Malicious ids {sorted(outside)} are not in "
                f"[1, {self.num_clients}]")

    @property
    def client_ids(self):
        return list(range(1, self.num_clients + 1))

    def initial_model(self):
        return init_model(self.arch, derive_seed(self.master_seed,
                                                 INIT_STREAM))


@dataclass(eq=False)
class RoundOutcome:
    """
    Result of one global round t.

    Attributes:
        round(int): Round index t.
        global_model(ndarray): M_{t+1}.
        updates(dict): Client id to uploaded update g_t^c.
        aggregate(ndarray): G_t, FedAvg of `updates`.
        loss(float): F(M_{t+1}).
        sizes(dict): Client id to |D_c|.
        wall_time(float): Seconds spent in the round.
    """
    round: int
    global_model: ParamVector
    updates: Dict[int, ParamVector]
    aggregate: ParamVector
    loss: float
    sizes: Dict[int, int]
    wall_time: float = 0.0


@dataclass(eq=False)
class TrainingState:
    """
    What the coordinator holds between rounds: the current global model and
    every client's (possibly poisoned) local dataset.
    """
    model: ParamVector
    arch: ModelArch
    datasets: Dict[int, Dataset]
    local: LocalTrainConfig
    master_seed: int
    workers: int = 1
    pooled: Optional[Dataset] = None

    def __post_init__(self):
        if not self.datasets:
            raise EmptyInputError("Training needs at least one client")
        if self.pooled is None:
            self.pooled = Dataset.concat(
                [self.datasets[c] for c in sorted(self.datasets)], "pooled")

    @property
    def sizes(self):
        return {c: len(d) for c, d in self.datasets.items()}

    def global_loss(self, model):
        return loss(model, self.arch, self.pooled)


@dataclass(eq=False)
class TrainingResult:
    """
    Attributes:
        final_model(ndarray): M_T.
        losses(list): F(M_1) .. F(M_T).
        trajectory(list): M_0 .. M_T.
        initial_loss(float): F(M_0).
        wall_times(list): Seconds per round.
    """
    final_model: ParamVector
    losses: List[float]
    trajectory: List[ParamVector]
    initial_loss: float
    wall_times: List[float] = field(default_factory=list)


def aggregate(updates, sizes):
    """
    FedAvg: the |D_c| / sum |D| weighted mean of the client updates.

    Args:
        updates(dict): Client id to update vector.
        sizes(dict): Client id to local dataset size.

    Returns:
        ndarray: The weighted average.

    Raises:
        ContractViolationError: On key mismatch, empty maps, non-positive
                                sizes or vectors of different lengths.
    """
    if not updates or set(updates) != set(sizes):
        raise ContractViolationError(
            "aggregate needs non-empty update and size maps over the same "
            "clients")
    if any(sizes[c] <= 0 for c in sizes):
        raise ContractViolationError("Every aggregated client needs |D_c| > 0")
    clients = sorted(updates)
    lengths = {updates[c].shape for c in clients}
    if len(lengths) != 1:
        raise ContractViolationError(
            f"Updates of different shapes: {sorted(lengths)}")
    total = float(sum(sizes[c] for c in clients))
    result = np.zeros_like(updates[clients[0]], dtype=np.float64)
    for client in clients:
        result += (sizes[client] / total) * updates[client]
    return result


def train_clients(model, arch, datasets, local, master_seed, round_index,
                  workers=1, trainer=None):
    """
    Local training of several clients from the same model. Client c of
    round t trains with seed derive_seed(master_seed, c, t), so the result
    does not depend on the worker count.

    Args:
        trainer(callable): Optional (client_id, cfg) -> update replacing
                           plain local_train.

    Returns:
        dict: Client id to update, in client id order.
    """
    clients = sorted(datasets)

    def train(client):
        cfg = local.with_seed(derive_seed(master_seed, client, round_index))
        if trainer is not None:
            return trainer(client, cfg)
        return local_train(model, arch, datasets[client], cfg)

    if workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(train, clients))
    else:
        results = [train(client) for client in clients]
    return dict(zip(clients, results))


def run_round(state, adversary_hook, t):
    """
    One global round: local training, adversary hook on uploads, FedAvg and
    model update. `state` is not modified.

    Args:
        state(TrainingState): Current M_t and client datasets.
        adversary_hook(callable): (client_id, t, update) -> upload.
        t(int): Round index.

    Returns:
        RoundOutcome: The round with M_{t+1}.
    """
    started = time.perf_counter()
    honest = train_clients(state.model, state.arch, state.datasets,
                           state.local, state.master_seed, t, state.workers)
    uploads = {c: adversary_hook(c, t, u) for c, u in honest.items()}
    sizes = state.sizes
    aggregated = aggregate(uploads, sizes)
    new_model = state.model + aggregated
    check_finite(new_model, f"global model after round {t}")
    return RoundOutcome(round=t, global_model=new_model, updates=uploads,
                        aggregate=aggregated,
                        loss=state.global_loss(new_model), sizes=sizes,
                        wall_time=time.perf_counter() - started)


def run_training(cfg, store, datasets, adversary_hook=no_attack,
                 interval_store=None, side_stores=()):
    """
    T rounds of federated training with selective storage.

    Args:
        cfg(FlConfig): Training settings.
        store(HistoryStore): Receives every round; closes windows itself.
        datasets(dict): Client id to local dataset (already poisoned for
                        malicious clients under a backdoor attack).
        adversary_hook(callable): Upload hook of the malicious clients.
        interval_store(HistoryStore): Optional fixed-interval capture for the
                                      FedEraser baseline.
        side_stores(iterable): Further stores fed the same rounds, e.g. one
                               per selection rate of an ablation.

    Returns:
        TrainingResult: Final model, loss trajectory and model trajectory.
    """
    cfg.validate()
    if sorted(datasets) != cfg.client_ids:
        raise ContractViolationError(
            f"Expected datasets for clients 1..{cfg.num_clients}")
    for data in datasets.values():
        data.check_against(cfg.arch)
    state = TrainingState(model=cfg.initial_model(), arch=cfg.arch,
                          datasets=datasets, local=cfg.local,
                          master_seed=cfg.master_seed, workers=cfg.workers)
    initial_loss = state.global_loss(state.model)
    log_obj.info(f"Training {cfg.num_clients} clients for {cfg.rounds} "
                 f"rounds, initial loss {initial_loss:.6f}")
    captures = [store] + [s for s in (interval_store, *side_stores)
                          if s is not None]
    for capture in captures:
        capture.begin(state.model, initial_loss, cfg.num_clients)

    result = TrainingResult(final_model=state.model, losses=[],
                            trajectory=[state.model],
                            initial_loss=initial_loss)
    for t in range(cfg.rounds):
        outcome = run_round(state, adversary_hook, t)
        log_obj.info(f"Round {t}: loss={outcome.loss:.6f}, "
                     f"wall_time={outcome.wall_time:.3f}s")
        for capture in captures:
            capture.push(outcome)
        state.model = outcome.global_model
        result.losses.append(outcome.loss)
        result.trajectory.append(outcome.global_model)
        result.wall_times.append(outcome.wall_time)
    for capture in captures:
        capture.finalize()
    result.final_model = state.model
    log_obj.info(f"Training finished: {len(store)} rounds stored in "
                 f"{len(store.windows)} windows")
    return result
