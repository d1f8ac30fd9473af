# Crab recovery engine module

# Description: Recovery of the global model once the malicious clients are
#              known. The Crab loop restarts from the rollback model, lets
#              benign clients renew their updates, rescales every renewal
#              to the norm of the client's stored update, averages and
#              steps. Train-from-scratch and the fixed-interval (FedEraser
#              style) replay are provided as baselines.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .error_handler import ContractViolationError, EmptyInputError
from .logging_handler import log_obj
from .numerics import (Dataset, LocalTrainConfig, ParamVector, check_finite,
                       derive_seed, init_model, local_train, loss)
from .orchestrator import (INIT_STREAM, TrainingState, aggregate, no_attack,
                           run_round, train_clients)
from .rollback import INITIAL, SensitivityReport, analyze_rollback

RECOVERY_METHODS = ("crab", "retrain", "federaser")


@dataclass(frozen=True)
class RecoveryConfig:
    """
    Attributes:
        method(str): "crab", "retrain" or "federaser".
        beta(float): Sensitivity ratio of the adaptive rollback (crab).
        federaser_interval(int): Delta t of the interval history (federaser).
        local(LocalTrainConfig): Local SGD settings, the training ones.
        forced_rollback(int): Skip the sensitivity analysis and roll back to
                              this stored index (0 = initial model).
    """
    method: str = "crab"
    beta: float = 0.3
    federaser_interval: int = 1
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    forced_rollback: Optional[int] = None

    def __post_init__(self):
        if self.method not in RECOVERY_METHODS:
            raise ContractViolationError(
                f"Unknown recovery method: {self.method}")
        if not 0.0 < self.beta <= 1.0:
            raise ContractViolationError(f"beta must lie in (0, 1], got "
                                         f"{self.beta}")
        if self.federaser_interval < 1:
            raise ContractViolationError("federaser_interval must be >= 1")
        if self.forced_rollback is not None and self.forced_rollback < 0:
            raise ContractViolationError("forced_rollback must be >= 0")


@dataclass
class RecoveryRound:
    """
    Log of one recovery round r.
    """
    r: int
    source_round: int
    loss: float
    wall_time: float
    participants: List[int] = field(default_factory=list)
    sigmas: Dict[int, float] = field(default_factory=dict)
    renewal_norms: Dict[int, float] = field(default_factory=dict)

    @property
    def sigma_sum(self):
        return float(sum(self.sigmas.values()))

    def to_dict(self):
        return {"r": self.r, "source_round": self.source_round,
                "loss": self.loss, "wall_time": self.wall_time,
                "participants": self.participants,
                "sigmas": {str(c): s for c, s in self.sigmas.items()},
                "sigma_sum": self.sigma_sum,
                "renewal_norms": {str(c): n
                                  for c, n in self.renewal_norms.items()}}

    @classmethod
    def from_dict(cls, values):
        return cls(r=int(values["r"]),
                   source_round=int(values["source_round"]),
                   loss=float(values["loss"]),
                   wall_time=float(values["wall_time"]),
                   participants=[int(c) for c in values["participants"]],
                   sigmas={int(c): float(s)
                           for c, s in values["sigmas"].items()},
                   renewal_norms={int(c): float(n) for c, n
                                  in values["renewal_norms"].items()})


@dataclass(eq=False)
class RecoveryTrace:
    """
    Everything a recovery run produced.

    Attributes:
        method(str): Recovery method name.
        rollback_index(int): j*, 0 for the initial model.
        models(list): Recovered models M~_0 .. M~_R.
        rounds(list): RecoveryRound logs, one per executed round.
        report(SensitivityReport): Rollback analysis (crab only).
    """
    method: str
    rollback_index: int
    models: List[ParamVector]
    rounds: List[RecoveryRound] = field(default_factory=list)
    report: Optional[SensitivityReport] = None

    @property
    def initial_model(self):
        return self.models[0]

    @property
    def final_model(self):
        return self.models[-1]

    @property
    def sigma_sums(self):
        return [r.sigma_sum for r in self.rounds]

    @property
    def wall_times(self):
        return [r.wall_time for r in self.rounds]

    def __len__(self):
        return len(self.rounds)


def renew_update(client_id, model, arch, data, cfg, malicious_ids=()):
    """
    A benign client's renewal update from the current recovered model.

    Returns:
        ndarray: local_train(model, data, cfg), i.e. -eta * sum of the local
                 gradients.
    """
    if client_id in set(malicious_ids):
        raise ContractViolationError(
            f"Client {client_id} is malicious and cannot renew updates")
    return local_train(model, arch, data, cfg)


def calibrate(renewal, historical):
    """
    Keep the direction of the renewal, take the magnitude of the stored
    historical update.

    Args:
        renewal(ndarray): Fresh update U^_r^c.
        historical(ndarray): Stored update U_hist^c.

    Returns:
        ndarray: |U_hist| * U^ / |U^|; zeros if the renewal is zero.
    """
    renewal = np.asarray(renewal, dtype=np.float64)
    historical = np.asarray(historical, dtype=np.float64)
    if renewal.shape != historical.shape:
        raise ContractViolationError(
            f"Calibrating {renewal.shape} against {historical.shape}")
    renewal_norm = np.linalg.norm(renewal)
    if renewal_norm == 0.0:
        return np.zeros_like(renewal)
    return (np.linalg.norm(historical) / renewal_norm) * renewal


def _benign_pool(datasets):
    return Dataset.concat([datasets[c] for c in sorted(datasets)], "benign")


def recovery_round(store, j_star, r, datasets, model, local, master_seed,
                   workers=1, pooled=None):
    """
    One calibrated recovery round against stored record j* + r.

    Benign clients stored in that record renew from `model` (with the seed
    of the stored round), get calibrated against their own stored update and
    are averaged with weights |D_c| / |D-|. Benign clients not stored in the
    record sit the round out.

    Args:
        store(HistoryStore): Stored history.
        j_star(int): Rollback index.
        r(int): Recovery round.
        datasets(dict): Benign client id to local dataset.
        model(ndarray): M~_r.
        local(LocalTrainConfig): Local SGD settings.
        master_seed(int): Experiment seed.
        workers(int): Threads for renewals.
        pooled(Dataset): Benign pooled data for the loss log.

    Returns:
        tuple: (M~_{r+1}, RecoveryRound).
    """
    index = j_star + r
    if not 0 <= index < len(store.records):
        raise ContractViolationError(
            f"No stored record at index {index} ({len(store.records)} "
            "stored)")
    started = time.perf_counter()
    record = store.records[index]
    participants = [c for c in record.client_ids if c in datasets]
    log_round = RecoveryRound(r=r, source_round=record.round, loss=0.0,
                              wall_time=0.0, participants=participants)
    if participants:
        renewals = train_clients(
            model, store.arch, {c: datasets[c] for c in participants}, local,
            master_seed, record.round, workers,
            trainer=lambda c, cfg: renew_update(c, model, store.arch,
                                                datasets[c], cfg))
        calibrated = {c: calibrate(renewals[c], record.updates[c])
                      for c in participants}
        sizes = {c: record.sizes[c] for c in participants}
        total = float(sum(sizes.values()))
        for client in participants:
            renewal_norm = float(np.linalg.norm(renewals[client]))
            log_round.renewal_norms[client] = renewal_norm
            stored_norm = float(np.linalg.norm(record.updates[client]))
            log_round.sigmas[client] = 0.0 if renewal_norm == 0.0 else \
                (sizes[client] / total) * (stored_norm / renewal_norm)
        next_model = model + aggregate(calibrated, sizes)
    else:
        log_obj.warning(f"Recovery round {r}: no benign client stored for "
                        f"round {record.round}, model unchanged")
        next_model = model.copy()
    check_finite(next_model, f"recovered model of round {r}")
    if pooled is None:
        pooled = _benign_pool(datasets)
    log_round.loss = loss(next_model, store.arch, pooled)
    log_round.wall_time = time.perf_counter() - started
    log_obj.info(f"Recovery round {r}: loss={log_round.loss:.6f}, "
                 f"sigma={log_round.sigma_sum:.6f}, "
                 f"wall_time={log_round.wall_time:.3f}s")
    return next_model, log_round


def _replay(store, j_star, datasets, local, master_seed, method, workers,
            report=None):
    if j_star > len(store.records):
        raise ContractViolationError(
            f"Rollback index {j_star} beyond {len(store.records)} records")
    if j_star == INITIAL:
        if store.initial_model is None:
            raise ContractViolationError("Store holds no initial model")
        model = store.initial_model.copy()
    else:
        model = store.records[j_star - 1].model.copy()
    pooled = _benign_pool(datasets)
    trace = RecoveryTrace(method=method, rollback_index=j_star,
                          models=[model], report=report)
    for r in range(len(store.records) - j_star):
        model, log_round = recovery_round(store, j_star, r, datasets, model,
                                          local, master_seed, workers,
                                          pooled)
        trace.models.append(model)
        trace.rounds.append(log_round)
    return trace


def _benign_only(datasets, malicious_ids):
    benign = {c: d for c, d in datasets.items() if c not in malicious_ids}
    if not benign:
        raise EmptyInputError("Recovery needs at least one benign client")
    return benign


def run_crab(store, malicious_ids, datasets, cfg, master_seed, workers=1):
    """
    Adaptive rollback, then T' - j* calibrated recovery rounds.

    Args:
        store(HistoryStore): Selectively stored history, non-empty.
        malicious_ids(set): Detected malicious clients C_u.
        datasets(dict): Client id to local dataset (malicious ones ignored).
        cfg(RecoveryConfig): Recovery settings.
        master_seed(int): Experiment seed.
        workers(int): Threads for renewals.

    Returns:
        RecoveryTrace: The recovered trajectory.
    """
    if len(store) == 0:
        raise EmptyInputError("Crab recovery needs stored rounds")
    malicious_ids = set(malicious_ids)
    benign = _benign_only(datasets, malicious_ids)
    report = analyze_rollback(store, malicious_ids, cfg.beta)
    j_star = report.rollback_index
    if cfg.forced_rollback is not None:
        j_star = cfg.forced_rollback
        log_obj.info(f"Rollback forced to j*={j_star}")
    log_obj.info(f"Crab recovery: {len(store) - j_star} rounds from "
                 f"j*={j_star}")
    return _replay(store, j_star, benign, cfg.local, master_seed, "crab",
                   workers, report)


def run_federaser(interval_store, malicious_ids, datasets, cfg, master_seed,
                  workers=1):
    """
    FedEraser-style baseline: roll back to M_0 and calibrate against every
    interval record (all clients stored).
    """
    if len(interval_store) == 0:
        raise EmptyInputError("FedEraser recovery needs interval records")
    benign = _benign_only(datasets, set(malicious_ids))
    log_obj.info(f"FedEraser recovery: {len(interval_store)} rounds from the "
                 "initial model")
    return _replay(interval_store, INITIAL, benign, cfg.local, master_seed,
                   "federaser", workers)


def run_retrain(datasets, arch, local, rounds, master_seed,
                initial_model=None, workers=1, method="retrain"):
    """
    Train-from-scratch baseline: plain FedAvg over the given (benign)
    clients for `rounds` rounds.

    Args:
        datasets(dict): Benign client id to dataset.
        arch(ModelArch): Model architecture.
        local(LocalTrainConfig): Local SGD settings.
        rounds(int): Number of rounds, may be 0.
        master_seed(int): Experiment seed; also fixes the fresh M_0.
        initial_model(ndarray): Start here instead of a fresh M_0.

    Returns:
        RecoveryTrace: Models M_0 .. M_rounds.
    """
    if rounds < 0:
        raise ContractViolationError("rounds must be >= 0")
    if initial_model is None:
        initial_model = init_model(arch, derive_seed(master_seed,
                                                     INIT_STREAM))
    state = TrainingState(model=np.array(initial_model, dtype=np.float64),
                          arch=arch, datasets=dict(datasets), local=local,
                          master_seed=master_seed, workers=workers)
    trace = RecoveryTrace(method=method, rollback_index=INITIAL,
                          models=[state.model])
    for t in range(rounds):
        outcome = run_round(state, no_attack, t)
        state.model = outcome.global_model
        trace.models.append(outcome.global_model)
        trace.rounds.append(RecoveryRound(
            r=t, source_round=t, loss=outcome.loss,
            wall_time=outcome.wall_time, participants=sorted(datasets)))
        log_obj.info(f"{method.capitalize()} round {t}: "
                     f"loss={outcome.loss:.6f}, "
                     f"wall_time={outcome.wall_time:.3f}s")
    return trace


def run_scratch(trace, datasets, arch, local, rounds, master_seed, workers=1):
    """
    Benign FedAvg reference trajectory starting from a recovery's M~_0.
    """
    return run_retrain(datasets, arch, local, rounds, master_seed,
                       initial_model=trace.initial_model, workers=workers,
                       method="scratch")
