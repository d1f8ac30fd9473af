# Crab adversary module

# Description: The two poisoning attacks used to build the poisoned model
#              that recovery has to undo: the untargeted trim attack that
#              perturbs a random share of the uploaded parameters, and the
#              backdoor attack that stamps a corner trigger on part of a
#              malicious client's data and relabels it.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import math
from dataclasses import dataclass, field

import numpy as np

from .error_handler import ContractViolationError
from .logging_handler import log_obj
from .numerics import Dataset, derive_seed

ATTACK_KINDS = ("none", "trim", "backdoor")
TRIM_MODES = ("gaussian_noise", "replace_random")

# Stream tags keep attack randomness apart from local training seeds.
TRIM_STREAM = 0x7471
BACKDOOR_STREAM = 0x6264


def fraction_count(fraction, total):
    """
    ceil(fraction * total), tolerant to binary rounding of the product.
    """
    return min(total, int(math.ceil(round(fraction * total, 9))))


@dataclass(frozen=True)
class TriggerSpec:
    """
    A solid patch in the bottom-right corner of a square image whose pixels
    are flattened row-major.
    """
    patch_rows: int = 4
    patch_cols: int = 4
    value: float = 1.0
    image_side: int = 28
    corner: str = "bottom_right"

    def __post_init__(self):
        if min(self.patch_rows, self.patch_cols, self.image_side) < 1:
            raise ContractViolationError("Trigger sizes must be positive")
        if self.patch_rows > self.image_side \
                or self.patch_cols > self.image_side:
            raise ContractViolationError(
                f"A {self.patch_rows}x{self.patch_cols} patch does not fit a "
                f"{self.image_side}x{self.image_side} image")
        if not 0.0 <= self.value <= 1.0:
            raise ContractViolationError("Trigger value must lie in [0, 1]")
        if self.corner != "bottom_right":
            raise ContractViolationError("Only the bottom_right corner is "
                                         "supported")


@dataclass(frozen=True)
class AttackConfig:
    """
    Attack settings. Only the fields of the selected kind are used.

    Attributes:
        kind(str): "none", "trim" or "backdoor".
        param_fraction(float): Share of uploaded coordinates the trim
                               attack perturbs.
        trim_mode(str): "gaussian_noise" or "replace_random".
        noise_sigma(float): Standard deviation of the trim noise.
        trigger(TriggerSpec): Backdoor trigger.
        target_label(int): Label assigned to triggered samples.
        poison_data_fraction(float): Share of a malicious client's samples
                                     that get the trigger.
    """
    kind: str = "none"
    param_fraction: float = 0.1
    trim_mode: str = "gaussian_noise"
    noise_sigma: float = 0.5
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    target_label: int = 0
    poison_data_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ContractViolationError(f"Unknown attack kind: {self.kind}")
        if self.trim_mode not in TRIM_MODES:
            raise ContractViolationError(
                f"Unknown trim mode: {self.trim_mode}")
        if not (0.0 <= self.param_fraction <= 1.0
                and 0.0 <= self.poison_data_fraction <= 1.0):
            raise ContractViolationError("Attack fractions must lie in [0, 1]")
        if not self.noise_sigma > 0:
            raise ContractViolationError("noise_sigma must be positive")
        if self.target_label < 0:
            raise ContractViolationError("target_label must be a class index")


def poison_trim(update, cfg, rng):
    """
    Perturb ceil(param_fraction * len) randomly chosen coordinates of an
    uploaded update; the others are returned bit-identical.

    Args:
        update(ndarray): The honest update.
        cfg(AttackConfig): Trim settings.
        rng(numpy.random.Generator): Source of the selection and noise.

    Returns:
        ndarray: A poisoned copy of `update`.
    """
    if cfg.kind != "trim":
        raise ContractViolationError(
            "poison_trim needs an attack of kind trim")
    poisoned = np.array(update, dtype=np.float64, copy=True)
    count = fraction_count(cfg.param_fraction, poisoned.shape[0])
    if count == 0:
        return poisoned
    chosen = rng.choice(poisoned.shape[0], size=count, replace=False)
    if cfg.trim_mode == "gaussian_noise":
        poisoned[chosen] += rng.normal(0.0, cfg.noise_sigma, size=count)
    else:
        poisoned[chosen] = rng.uniform(-1.0, 1.0, size=count)
    return poisoned


def embed_trigger(features, spec):
    """
    Stamp the trigger patch on one flattened image (or on every row of a
    matrix of flattened images).

    Args:
        features(ndarray): Row of length image_side**2, or (n, side**2).
        spec(TriggerSpec): Patch geometry and value.

    Returns:
        ndarray: A triggered copy.
    """
    stamped = np.array(features, dtype=np.float64, copy=True)
    side = spec.image_side
    if stamped.shape[-1] != side * side:
        raise ContractViolationError(
            f"Row length {stamped.shape[-1]} is not {side}x{side}")
    images = stamped.reshape(-1, side, side)
    images[:, side - spec.patch_rows:, side - spec.patch_cols:] = spec.value
    return images.reshape(stamped.shape)


def make_backdoor_dataset(data, cfg, rng):
    """
    Trigger and relabel a seed-chosen share of `data`. The size of the
    dataset and its feature range are preserved.
    """
    if cfg.kind != "backdoor":
        raise ContractViolationError(
            "make_backdoor_dataset needs an attack of kind backdoor")
    count = fraction_count(cfg.poison_data_fraction, len(data))
    if count == 0:
        return data
    chosen = np.sort(rng.choice(len(data), size=count, replace=False))
    features = data.features.copy()
    labels = data.labels.copy()
    features[chosen] = embed_trigger(features[chosen], cfg.trigger)
    labels[chosen] = cfg.target_label
    return Dataset(features, labels, data.owner)


class Adversary:
    """
    The malicious clients of one experiment.

    Attributes:
        cfg(AttackConfig): Attack settings.
        malicious_ids(frozenset): Client ids controlled by the attacker.
        master_seed(int): Experiment seed the attack streams derive from.

    Methods:
        prepare_datasets(self, datasets): Poison local data (backdoor).
        hook(self, client_id, t, update): Poison an upload (trim).

    Usage:
        adversary = Adversary(attack_cfg, {3, 7}, master_seed=11)
        datasets = adversary.prepare_datasets(datasets)
        upload = adversary.hook(3, t, update)
    """

    def __init__(self, cfg, malicious_ids, master_seed):
        self.cfg = cfg
        self.malicious_ids = frozenset(malicious_ids)
        self.master_seed = master_seed

    @property
    def active(self):
        return self.cfg.kind != "none" and bool(self.malicious_ids)

    def prepare_datasets(self, datasets):
        """
        Args:
            datasets(dict): Client id to Dataset.

        Returns:
            dict: Same keys; malicious clients hold backdoored data when the
                  attack is a backdoor.
        """
        if not self.active or self.cfg.kind != "backdoor":
            return dict(datasets)
        prepared = {}
        for client_id, data in datasets.items():
            if client_id in self.malicious_ids:
                rng = np.random.default_rng(derive_seed(
                    self.master_seed, client_id, BACKDOOR_STREAM))
                prepared[client_id] = make_backdoor_dataset(data, self.cfg,
                                                            rng)
                log_obj.debug(f"Backdoored local data of client {client_id}")
            else:
                prepared[client_id] = data
        return prepared

    def hook(self, client_id, t, update):
        if not self.active or self.cfg.kind != "trim" \
                or client_id not in self.malicious_ids:
            return update
        rng = np.random.default_rng(derive_seed(self.master_seed, client_id,
                                                t, TRIM_STREAM))
        return poison_trim(update, self.cfg, rng)
