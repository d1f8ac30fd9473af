# Crab experiment module

# Description: The experiment pipeline behind the command line. Prepares the
#              data, trains with the attack and selective storage, runs the
#              configured recovery methods and evaluates them, writing every
#              artifact into the output directory.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import os
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from .adversary import Adversary, AttackConfig
from .config import ExperimentConfig
from .data_handler import (IDX_NUM_CLASSES, gen_synthetic, load_idx,
                           partition_iid, split_disjoint)
from .error_handler import ArtifactIOError, ConfigError
from .evaluation import (attack_success_rate, audit_recovery_bound,
                         estimate_constants, evaluate_model, round_rows,
                         round_saving, storage_accounting, test_accuracy)
from .file_handler import FileHandler, load_trace, save_trace
from .folder_handler import HISTORY_DIR, INTERVAL_DIR, TRACES_DIR
from .history_store import HistoryStore, IntervalHistory, StorageConfig
from .logging_handler import log_obj
from .numerics import Dataset, ModelArch, derive_seed, loss
from .orchestrator import run_training
from .recovery_engine import (RecoveryTrace, run_crab, run_federaser,
                              run_retrain, run_scratch)
from .rollback import rollback_label, rollback_sweep

SPLIT_STREAM = 0x7370
PARTITION_STREAM = 0x7061
BOUND_STREAM = 0x626e
TRAINING_FILE = "training.npz"
ROLLBACK_FILE = "rollback.json"
REPORT_FILE = "report.json"
F_STAR_HORIZON = 3


@dataclass(eq=False)
class PreparedData:
    """
    Data of one experiment, identical for every stage of the same config.

    Attributes:
        arch(ModelArch): Model architecture fitted to the data.
        datasets(dict): Client id to local data as trained on (malicious
                        clients poisoned under a backdoor).
        testset(Dataset): Held-out test set.
        refset(Dataset): Server reference set of the storage scores.
        malicious_ids(frozenset): C_u.
        attack(AttackConfig): Attack with the trigger sized to the data.
        source(str): "idx" or "synthetic".
    """
    arch: ModelArch
    datasets: Dict[int, Dataset]
    testset: Dataset
    refset: Dataset
    malicious_ids: frozenset
    attack: AttackConfig
    source: str

    @property
    def benign(self):
        return {c: d for c, d in self.datasets.items()
                if c not in self.malicious_ids}

    @property
    def trigger(self):
        return self.attack.trigger if self.attack.kind == "backdoor" else None

    def members(self):
        """
        Samples the membership inference looks for: the malicious clients'
        data, or the benign data when nobody is malicious.
        """
        owners = sorted(self.malicious_ids) or sorted(self.datasets)
        return Dataset.concat([self.datasets[c] for c in owners], "members")


def _idx_available(spec):
    return os.path.isfile(spec.train_images) \
        and os.path.isfile(spec.train_labels)


def _test_available(spec):
    return bool(spec.test_images and spec.test_labels) \
        and os.path.isfile(spec.test_images) \
        and os.path.isfile(spec.test_labels)


def load_pool(cfg):
    """
    Returns:
        tuple: (train, test, reference, source), three disjoint Datasets.
    """
    spec = cfg.dataset
    split_seed = derive_seed(cfg.master_seed, SPLIT_STREAM)
    source = spec.source
    if source == "idx" and not _idx_available(spec):
        if not spec.synthetic_fallback:
            raise ArtifactIOError(f"IDX files not found: "
                                  f"{spec.train_images}, {spec.train_labels}")
        log_obj.warning(f"IDX files not found at {spec.train_images}, "
                        "falling back to synthetic data")
        source = "synthetic"
    if source == "synthetic":
        pool = gen_synthetic(spec.synthetic)
        train, test, reference = split_disjoint(
            pool, [spec.train_samples, spec.test_samples,
                   spec.reference_samples], split_seed)
        return train, test, reference, source
    if _test_available(spec):
        pool = load_idx(spec.train_images, spec.train_labels,
                        spec.train_samples + spec.reference_samples)
        train, reference = split_disjoint(
            pool, [spec.train_samples, spec.reference_samples], split_seed)
        test = load_idx(spec.test_images, spec.test_labels,
                        spec.test_samples)
        return train, test, reference, source
    pool = load_idx(spec.train_images, spec.train_labels)
    train, test, reference = split_disjoint(
        pool, [spec.train_samples, spec.test_samples,
               spec.reference_samples], split_seed)
    return train, test, reference, source


def prepare_data(cfg):
    """
    Load or generate the data, partition it IID across the clients and let
    the adversary poison the malicious clients' local data.
    """
    cfg.validate()
    train, test, reference, source = load_pool(cfg)
    num_classes = IDX_NUM_CLASSES if source == "idx" \
        else cfg.dataset.synthetic.num_classes
    if len(test) < cfg.dataset.test_samples:
        raise ConfigError(f"Test set holds {len(test)} samples, "
                          f"{cfg.dataset.test_samples} requested")
    arch = cfg.arch(train.width, num_classes)
    attack = cfg.attack_for(arch.input_dim)
    if attack.kind == "backdoor" and attack.target_label >= num_classes:
        raise ConfigError(f"target_label {attack.target_label} is not one of "
                          f"{num_classes} classes")
    malicious = cfg.malicious_ids()
    clients = partition_iid(train, cfg.federated.num_clients,
                            derive_seed(cfg.master_seed, PARTITION_STREAM))
    adversary = Adversary(attack, malicious, cfg.master_seed)
    log_obj.info(f"Data ready: {source}, {len(train)} train / {len(test)} "
                 f"test / {len(reference)} reference samples, malicious "
                 f"clients {sorted(malicious)}")
    return PreparedData(arch=arch,
                        datasets=adversary.prepare_datasets(clients),
                        testset=test, refset=reference,
                        malicious_ids=malicious, attack=attack, source=source)


def _train_attacked(cfg, data, stores):
    """
    Train under the experiment's attack, feeding every store the same rounds.
    """
    fl = cfg.fl_config(data.arch, stores[0].config)
    adversary = Adversary(data.attack, data.malicious_ids, cfg.master_seed)
    return run_training(fl, stores[0], data.datasets, adversary.hook,
                        side_stores=stores[1:])


class ExperimentRunner:
    """
    Runs the pipeline stages against one output directory. Every stage can
    run on its own: what an earlier stage produced is read back from disk.

    Attributes:
        cfg(ExperimentConfig): Validated experiment configuration.
        folder(FolderHandler): The output directory.

    Methods:
        train(self): Federated training with attack and storage.
        recover(self): Rollback and recovery for every configured method.
        evaluate(self): Metrics, bound audit, ablations and the report.
        selection_sweep(self): Crab under other selection rates.
        malicious_sweep(self): Crab under other malicious fractions.
        run(self): All of the above.

    Usage:
        with FolderHandler(cfg.output_dir) as folder:
            ExperimentRunner(cfg, folder).run()
    """

    def __init__(self, cfg: ExperimentConfig, folder):
        cfg.validate()
        self.cfg = cfg
        self.folder = folder
        self._data: Optional[PreparedData] = None
        self._store: Optional[HistoryStore] = None
        self._interval: Optional[IntervalHistory] = None
        self._training: Optional[dict] = None
        self._traces: Dict[str, RecoveryTrace] = {}

    @property
    def data(self):
        if self._data is None:
            self._data = prepare_data(self.cfg)
        return self._data

    @property
    def uses_interval(self):
        return "federaser" in self.cfg.recovery.methods

    @property
    def store(self):
        if self._store is None:
            self._store = HistoryStore.load(self.folder.path(HISTORY_DIR))
        return self._store

    @property
    def interval(self):
        if self._interval is None:
            self._interval = HistoryStore.load(self.folder.path(INTERVAL_DIR))
        return self._interval

    @property
    def training(self):
        if self._training is None:
            self._training = FileHandler(
                self.folder.path(TRAINING_FILE)).read_arrays()
        return self._training

    def trace(self, method):
        if method not in self._traces:
            self._traces[method] = load_trace(self.folder.path(TRACES_DIR),
                                              method)
        return self._traces[method]

    def storage_config(self):
        storage = self.cfg.storage
        return StorageConfig(alpha=storage.alpha,
                             round_ratio=storage.round_ratio,
                             client_ratio=storage.client_ratio,
                             refset=self.data.refset,
                             smoothing=storage.smoothing)

    def train(self):
        data = self.data
        storage = self.storage_config()
        store = HistoryStore(storage, data.arch)
        interval = IntervalHistory(storage, data.arch,
                                   self.cfg.recovery.federaser_interval) \
            if self.uses_interval else None
        fl = self.cfg.fl_config(data.arch, storage)
        adversary = Adversary(data.attack, data.malicious_ids,
                              self.cfg.master_seed)
        result = run_training(fl, store, data.datasets, adversary.hook,
                              interval)
        store.persist(self.folder.path(HISTORY_DIR))
        if interval is not None:
            interval.persist(self.folder.path(INTERVAL_DIR))
        arrays = {"trajectory": np.stack(result.trajectory),
                  "losses": np.asarray(result.losses, dtype=np.float64),
                  "wall_times": np.asarray(result.wall_times,
                                           dtype=np.float64),
                  "initial_loss": np.float64(result.initial_loss),
                  "malicious_ids": np.asarray(sorted(data.malicious_ids),
                                              dtype=np.int64)}
        FileHandler(self.folder.path(TRAINING_FILE)).write_arrays(**arrays)
        self._store, self._interval, self._training = store, interval, arrays
        return result

    def recover(self):
        data = self.data
        traces = {}
        for rec in self.cfg.recovery_configs():
            log_obj.info(f"Recovery method: {rec.method}")
            if rec.method == "crab":
                trace = run_crab(self.store, data.malicious_ids,
                                 data.datasets, rec, self.cfg.master_seed,
                                 self.cfg.workers)
                self._write_rollback(trace)
            elif rec.method == "federaser":
                trace = run_federaser(self.interval, data.malicious_ids,
                                      data.datasets, rec,
                                      self.cfg.master_seed, self.cfg.workers)
            else:
                trace = run_retrain(data.benign, data.arch, rec.local,
                                    self.cfg.federated.rounds,
                                    self.cfg.master_seed,
                                    workers=self.cfg.workers)
            save_trace(trace, self.folder.path(TRACES_DIR))
            traces[rec.method] = trace
        self._traces.update(traces)
        return traces

    def _write_rollback(self, trace):
        sweep = rollback_sweep(self.store, self.data.malicious_ids,
                               self.cfg.recovery.beta_sweep)
        FileHandler(self.folder.path(ROLLBACK_FILE)).write_json({
            "report": trace.report.to_dict(),
            "rollback_index": rollback_label(trace.rollback_index),
            "stored_rounds": len(self.store),
            "beta_sweep": {str(beta): rollback_label(j)
                           for beta, j in sweep.items()}})

    def _bound_checks(self, trace):
        data = self.data
        rounds = self.cfg.federated.rounds
        local = self.cfg.local_config()
        benign = data.benign
        pooled = Dataset.concat([benign[c] for c in sorted(benign)], "benign")
        # One long benign run from M~_0: its first T rounds are the scratch
        # reference, its lowest loss the F_star estimate.
        long_run = run_scratch(trace, benign, data.arch, local,
                               F_STAR_HORIZON * rounds, self.cfg.master_seed,
                               self.cfg.workers)
        scratch = RecoveryTrace(method="scratch", rollback_index=0,
                                models=long_run.models[:rounds + 1],
                                rounds=long_run.rounds[:rounds])
        f_init = loss(trace.initial_model, data.arch, pooled)
        f_star = min([r.loss for r in long_run.rounds] + [f_init])
        renewal_norms = [n for r in trace.rounds
                         for n in r.renewal_norms.values()]
        constants = estimate_constants(
            trace.models + scratch.models, benign, data.arch,
            local.learning_rate, rounds,
            trace.rollback_index + len(trace), trace.rollback_index,
            f_init, f_star, renewal_norms,
            seed=derive_seed(self.cfg.master_seed, BOUND_STREAM))
        return audit_recovery_bound(trace, scratch, constants), constants

    def _crab_row(self, store, data):
        trace = run_crab(store, data.malicious_ids, data.datasets,
                         self.cfg.recovery_config("crab"),
                         self.cfg.master_seed, self.cfg.workers)
        trigger = data.trigger
        return {"stored_rounds": len(store),
                "stored_entries": store.stored_entry_count(),
                "rollback_index": rollback_label(trace.rollback_index),
                "rounds_executed": len(trace),
                "test_accuracy": test_accuracy(trace.final_model, data.arch,
                                               data.testset),
                "asr": None if trigger is None else attack_success_rate(
                    trace.final_model, data.arch, data.testset, trigger,
                    data.attack.target_label)}

    def selection_sweep(self):
        """
        Crab under each round selection rate (delta fixed) and each client
        selection rate (lambda fixed). One training run feeds every store.

        Returns:
            dict: "round_ratio" and "client_ratio" rows.
        """
        storage = self.cfg.storage
        settings = [("round_ratio", v) for v in storage.round_ratio_sweep] \
            + [("client_ratio", v) for v in storage.client_ratio_sweep]
        rows = {"round_ratio": [], "client_ratio": []}
        if not settings:
            return rows
        data = self.data
        base = self.storage_config()
        stores = [HistoryStore(replace(base, **{name: value}), data.arch)
                  for name, value in settings]
        log_obj.info(f"Selection rate sweep over {len(stores)} settings")
        _train_attacked(self.cfg, data, stores)
        for (name, value), store in zip(settings, stores):
            rows[name].append({name: value, **self._crab_row(store, data)})
        return rows

    def malicious_sweep(self):
        """
        Training and Crab recovery for each malicious client fraction.

        Returns:
            list: One row per fraction.
        """
        rows = []
        for fraction in self.cfg.federated.malicious_fraction_sweep:
            cfg = self.cfg.with_malicious_fraction(fraction)
            sweep = ExperimentRunner(cfg, self.folder)
            data = sweep.data
            store = HistoryStore(sweep.storage_config(), data.arch)
            log_obj.info(f"Malicious fraction {fraction}: clients "
                         f"{sorted(data.malicious_ids)}")
            result = _train_attacked(cfg, data, [store])
            poisoned = result.final_model
            row = {"malicious_fraction": fraction,
                   "malicious_clients": len(data.malicious_ids),
                   "poisoned_accuracy": test_accuracy(poisoned, data.arch,
                                                      data.testset),
                   "poisoned_asr": None if data.trigger is None
                   else attack_success_rate(poisoned, data.arch, data.testset,
                                            data.trigger,
                                            data.attack.target_label)}
            if data.malicious_ids:
                row.update(sweep._crab_row(store, data))
            rows.append(row)
        return rows

    def evaluate(self):
        data = self.data
        rounds = self.cfg.federated.rounds
        members = data.members()
        trigger, target = data.trigger, data.attack.target_label
        losses = self.training["losses"]
        accounting = storage_accounting(
            self.store, rounds, self.cfg.federated.num_clients,
            self.cfg.recovery.federaser_interval if self.uses_interval
            else None, float(self.training["initial_loss"]),
            float(losses[-1]))
        poisoned = evaluate_model("poisoned", self.training["trajectory"][-1],
                                  data.arch, data.testset, members,
                                  data.testset, trigger, target)
        poisoned.runtimes = [float(t) for t in self.training["wall_times"]]
        poisoned.rounds_executed = rounds
        methods = {}
        for method in self.cfg.recovery.methods:
            trace = self.trace(method)
            report = evaluate_model(method, trace.final_model, data.arch,
                                    data.testset, members, data.testset,
                                    trigger, target)
            report.runtimes = trace.wall_times
            report.rounds_executed = len(trace)
            report.rollback_index = trace.rollback_index
            report.round_saving = round_saving(
                trace.rollback_index + len(trace), trace.rollback_index,
                rounds)
            if method == "crab":
                report.storage = accounting
                if self.cfg.evaluation.bound_audit:
                    report.bound_checks, report.constants = \
                        self._bound_checks(trace)
            elif method == "federaser":
                report.storage = {"stored_rounds": len(self.interval),
                                  "stored_entries":
                                  self.interval.stored_entry_count()}
            if self.cfg.evaluation.csv:
                FileHandler(self.folder.path(f"rounds_{method}.csv")) \
                    .write_csv(round_rows(trace, data.arch, data.testset,
                                          trigger, target,
                                          report.bound_checks))
            log_obj.info(f"{method}: accuracy={report.test_accuracy:.4f}, "
                         f"asr={report.asr:.4f}, misr={report.misr:.4f}, "
                         f"rounds={report.rounds_executed}")
            methods[method] = report
        payload = {
            "config": self.cfg.to_dict(),
            "data": {"source": data.source,
                     "clients": {str(c): len(d)
                                 for c, d in sorted(data.datasets.items())},
                     "test_samples": len(data.testset),
                     "reference_samples": len(data.refset)},
            "malicious_ids": sorted(data.malicious_ids),
            "training": {"rounds": rounds,
                         "initial_loss": float(self.training["initial_loss"]),
                         "final_loss": float(losses[-1])},
            "storage": accounting,
            "poisoned": poisoned.to_dict(),
            "methods": {m: r.to_dict() for m, r in methods.items()},
            "ablation": {**self.selection_sweep(),
                         "malicious_fraction": self.malicious_sweep()}}
        FileHandler(self.folder.path(REPORT_FILE)).write_json(payload)
        return poisoned, methods

    def run(self):
        self.train()
        self.recover()
        return self.evaluate()
