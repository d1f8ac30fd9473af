# Crab configuration module

# Description: Experiment configuration. A UTF-8 JSON file is parsed into
#              frozen dataclasses whose defaults are the published
#              evaluation settings at desk scale; unknown keys and invalid
#              values are rejected before any computation starts.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .adversary import AttackConfig, TriggerSpec, fraction_count
from .data_handler import IDX_NUM_CLASSES, SyntheticSpec
from .error_handler import ConfigError, ContractViolationError
from .numerics import LocalTrainConfig, ModelArch, derive_seed
from .orchestrator import FlConfig
from .recovery_engine import RECOVERY_METHODS, RecoveryConfig

MALICIOUS_STREAM = 0x6d61
DATASET_SOURCES = ("idx", "synthetic")


@dataclass(frozen=True)
class DatasetSpec:
    """
    Where the data comes from and how much of it is used.

    Attributes:
        source(str): "idx" or "synthetic".
        train_images(str): IDX3 training images (may end in .gz).
        train_labels(str): IDX1 training labels.
        test_images(str): Optional IDX3 test images.
        test_labels(str): Optional IDX1 test labels.
        train_samples(int): Samples partitioned across clients.
        test_samples(int): Held-out test samples.
        reference_samples(int): Server reference set for p(M).
        synthetic_fallback(bool): Use the synthetic generator when the IDX
                                  files are missing.
        synthetic(SyntheticSpec): Generator settings.
        partition(str): Only "iid".
    """
    source: str = "idx"
    train_images: str = "data/train-images-idx3-ubyte"
    train_labels: str = "data/train-labels-idx1-ubyte"
    test_images: Optional[str] = "data/t10k-images-idx3-ubyte"
    test_labels: Optional[str] = "data/t10k-labels-idx1-ubyte"
    train_samples: int = 2000
    test_samples: int = 500
    reference_samples: int = 200
    synthetic_fallback: bool = True
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    partition: str = "iid"


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp1"
    hidden_dim: int = 32


@dataclass(frozen=True)
class FederatedSpec:
    num_clients: int = 20
    rounds: int = 40
    epochs: int = 5
    learning_rate: float = 0.005
    batch_size: int = 64
    malicious_fraction: float = 0.25
    malicious_ids: Optional[Tuple[int, ...]] = None
    malicious_fraction_sweep: Tuple[float, ...] = (0.1, 0.25, 0.5)


@dataclass(frozen=True)
class StorageSpec:
    alpha: float = 0.1
    round_ratio: float = 0.6
    client_ratio: float = 0.7
    smoothing: float = 1e-12
    round_ratio_sweep: Tuple[float, ...] = (0.2, 0.6, 1.0)
    client_ratio_sweep: Tuple[float, ...] = (0.3, 0.7, 1.0)


@dataclass(frozen=True)
class RecoverySpec:
    methods: Tuple[str, ...] = ("crab", "retrain", "federaser")
    beta: float = 0.3
    federaser_interval: int = 1
    forced_rollback: Optional[int] = None
    beta_sweep: Tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True)
class EvaluationSpec:
    bound_audit: bool = True
    csv: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A whole experiment: data, federated training, attack, storage, the
    recovery methods to compare and where the artifacts go.

    Usage:
        cfg = load_config("experiment_config.json")
        cfg = cfg.override(master_seed=7, output_dir="out")
        cfg.validate()
    """
    master_seed: int = 2024
    output_dir: str = "results"
    workers: int = 1
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    federated: FederatedSpec = field(default_factory=FederatedSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    storage: StorageSpec = field(default_factory=StorageSpec)
    recovery: RecoverySpec = field(default_factory=RecoverySpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)

    def override(self, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)

    def with_methods(self, methods):
        return dataclasses.replace(self, recovery=dataclasses.replace(
            self.recovery, methods=tuple(methods)))

    def with_malicious_fraction(self, fraction):
        """
        The same experiment with `fraction` of the clients malicious and
        the ids drawn from the master seed.
        """
        return dataclasses.replace(self, federated=dataclasses.replace(
            self.federated, malicious_fraction=fraction, malicious_ids=None))

    def validate(self):
        """
        Raises:
            ConfigError: On any invalid or inconsistent value.
        """
        data = self.dataset
        if data.source not in DATASET_SOURCES:
            raise ConfigError(f"Unknown dataset source: {data.source}")
        if data.partition != "iid":
            raise ConfigError(f"Unknown partition: {data.partition}")
        if min(data.train_samples, data.test_samples,
               data.reference_samples) < 1:
            raise ConfigError("Sample counts must be positive")
        fed = self.federated
        if min(fed.num_clients, fed.rounds, fed.epochs, fed.batch_size,
               self.workers) < 1 or not fed.learning_rate > 0:
            raise ConfigError("Federated settings must be positive")
        if data.train_samples < fed.num_clients:
            raise ConfigError(f"{data.train_samples} training samples cannot "
                              f"serve {fed.num_clients} clients")
        if any(not 0.0 <= f < 1.0 for f in (fed.malicious_fraction,
                                             *fed.malicious_fraction_sweep)):
            raise ConfigError("malicious fractions must lie in [0, 1)")
        if any(fraction_count(f, fed.num_clients) >= fed.num_clients
               for f in fed.malicious_fraction_sweep):
            raise ConfigError("Every malicious fraction of the sweep must "
                              "leave a benign client")
        malicious = self.malicious_ids()
        if len(malicious) >= fed.num_clients:
            raise ConfigError(f"{len(malicious)} malicious clients out of "
                              f"{fed.num_clients}: |C_u| must be < C")
        if any(not 1 <= c <= fed.num_clients for c in malicious):
            raise ConfigError(f"Malicious ids must lie in "
                              f"[1, {fed.num_clients}]")
        if self.model.kind not in ("logreg", "mlp1"):
            raise ConfigError(f"Unknown model kind: {self.model.kind}")
        if self.model.kind == "mlp1" and self.model.hidden_dim < 1:
            raise ConfigError("mlp1 needs hidden_dim >= 1")
        store = self.storage
        if not (0.0 < store.alpha < 1.0 and 0.0 < store.round_ratio <= 1.0
                and 0.0 < store.client_ratio <= 1.0 and store.smoothing > 0):
            raise ConfigError("Storage ratios out of range")
        if any(not 0.0 < r <= 1.0 for r in (*store.round_ratio_sweep,
                                            *store.client_ratio_sweep)):
            raise ConfigError("Selection rate sweeps must lie in (0, 1]")
        rec = self.recovery
        if not rec.methods or any(m not in RECOVERY_METHODS
                                  for m in rec.methods):
            raise ConfigError(f"Recovery methods must be among "
                              f"{RECOVERY_METHODS}")
        if not 0.0 < rec.beta <= 1.0 \
                or any(not 0.0 < b <= 1.0 for b in rec.beta_sweep):
            raise ConfigError("beta values must lie in (0, 1]")
        if not 1 <= rec.federaser_interval <= fed.rounds:
            raise ConfigError("federaser_interval must lie in [1, rounds]")
        if data.source == "synthetic":
            data.synthetic.validate()
        self.arch(self.input_dim_hint(), IDX_NUM_CLASSES
                  if data.source == "idx" else data.synthetic.num_classes)

    def input_dim_hint(self):
        return 784 if self.dataset.source == "idx" \
            else self.dataset.synthetic.input_dim

    def malicious_ids(self):
        fed = self.federated
        if fed.malicious_ids is not None:
            return frozenset(int(c) for c in fed.malicious_ids)
        count = fraction_count(fed.malicious_fraction, fed.num_clients)
        rng = np.random.default_rng(derive_seed(self.master_seed,
                                                MALICIOUS_STREAM))
        chosen = rng.choice(np.arange(1, fed.num_clients + 1), size=count,
                            replace=False)
        return frozenset(int(c) for c in chosen)

    def arch(self, input_dim, num_classes):
        hidden = self.model.hidden_dim if self.model.kind == "mlp1" else 0
        try:
            return ModelArch(self.model.kind, input_dim, hidden, num_classes)
        except ContractViolationError as error:
            raise ConfigError(str(error))

    def local_config(self):
        fed = self.federated
        return LocalTrainConfig(epochs=fed.epochs,
                                learning_rate=fed.learning_rate,
                                batch_size=fed.batch_size,
                                rng_seed=self.master_seed)

    def attack_for(self, input_dim):
        """
        The attack with the trigger sized to square images of `input_dim`.
        """
        if self.attack.kind != "backdoor":
            return self.attack
        side = int(math.isqrt(input_dim))
        if side * side != input_dim:
            raise ConfigError(f"Backdoor trigger needs square images, got "
                              f"{input_dim} features")
        try:
            trigger = dataclasses.replace(self.attack.trigger,
                                          image_side=side)
        except ContractViolationError as error:
            raise ConfigError(str(error))
        return dataclasses.replace(self.attack, trigger=trigger)

    def fl_config(self, arch, storage=None):
        return FlConfig(num_clients=self.federated.num_clients,
                        rounds=self.federated.rounds,
                        local=self.local_config(), arch=arch,
                        malicious_ids=self.malicious_ids(),
                        attack=self.attack_for(arch.input_dim),
                        storage=storage, master_seed=self.master_seed,
                        workers=self.workers)

    def recovery_config(self, method):
        rec = self.recovery
        return RecoveryConfig(method=method, beta=rec.beta,
                              federaser_interval=rec.federaser_interval,
                              local=self.local_config(),
                              forced_rollback=rec.forced_rollback)

    def recovery_configs(self):
        return [self.recovery_config(m) for m in self.recovery.methods]

    def to_dict(self):
        return dataclasses.asdict(self)


#############################################################
#                          Parsing                          #
#############################################################


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"'{where}' must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"Unknown keys in '{where}': {unknown}")
    kwargs = {}
    for name, raw in values.items():
        nested = NESTED.get((cls, name))
        if nested is not None:
            kwargs[name] = _build(nested, raw, f"{where}.{name}")
        elif isinstance(raw, list):
            kwargs[name] = tuple(raw)
        else:
            kwargs[name] = raw
    try:
        return cls(**kwargs)
    except (TypeError, ContractViolationError) as error:
        raise ConfigError(f"Invalid '{where}': {error}")


NESTED = {
    (ExperimentConfig, "dataset"): DatasetSpec,
    (ExperimentConfig, "model"): ModelSpec,
    (ExperimentConfig, "federated"): FederatedSpec,
    (ExperimentConfig, "attack"): AttackConfig,
    (ExperimentConfig, "storage"): StorageSpec,
    (ExperimentConfig, "recovery"): RecoverySpec,
    (ExperimentConfig, "evaluation"): EvaluationSpec,
    (DatasetSpec, "synthetic"): SyntheticSpec,
    (AttackConfig, "trigger"): TriggerSpec,
}


def parse_config(values):
    """
    Build an ExperimentConfig from a decoded JSON object.
    """
    return _build(ExperimentConfig, values, "config")


def load_config(path=None):
    """
    Read a JSON config file; without a path the defaults are returned.

    Raises:
        ConfigError: If the file cannot be read or parsed.
    """
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
    except OSError as os_error:
        raise ConfigError(f"Cannot read config {path}: {os_error}")
    except json.JSONDecodeError as decode_error:
        raise ConfigError(f"Config {path} is not valid JSON: {decode_error}")
    return parse_config(values)
