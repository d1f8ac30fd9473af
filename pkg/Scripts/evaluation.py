# Crab evaluation module

# Description: Metrics of recovered models (test accuracy, backdoor attack
#              success rate, loss-threshold membership inference), storage
#              and round accounting, empirical estimation of the smoothness
#              and gradient-norm constants, and the per-round audit of the
#              recovery error bound against a from-scratch benign run.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .adversary import embed_trigger, fraction_count
from .error_handler import (ContractViolationError, EmptyInputError,
                            EstimationError)
from .history_store import window_count
from .logging_handler import log_obj
from .numerics import Dataset, gradient, per_sample_loss, predict_labels

SAFETY_FACTOR = 1.1
PERTURBATION_PAIRS = 20
PERTURBATION_SCALE = 1e-3
MISR_LABEL = "MISR (loss-threshold variant)"


@dataclass
class BoundConstants:
    """
    Empirical constants of the recovery error bound.

    Attributes:
        L(float): Smoothness estimate.
        G(float): Gradient norm bound estimate.
        f_init(float): F(M~_0).
        f_star(float): Estimate of the optimal loss F(M*).
        learning_rate(float): eta.
        rounds(int): T.
        stored_rounds(int): T'.
        rollback_index(int): j*.
    """
    L: float
    G: float
    f_init: float
    f_star: float
    learning_rate: float
    rounds: int
    stored_rounds: int
    rollback_index: int

    def to_dict(self):
        return asdict(self)


@dataclass
class BoundCheck:
    r: int
    tau: int
    lhs: float
    rhs: float
    passed: bool
    clamped: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsReport:
    """
    Evaluation of one model (poisoned, or the result of a recovery method).

    Attributes:
        name(str): "poisoned", "crab", "retrain", "federaser", ...
        test_accuracy(float): Share of test samples predicted correctly.
        asr(float): Share of triggered test samples predicted as the target.
        misr(float): Loss-threshold membership inference balanced accuracy.
        runtimes(list): Seconds per round.
        rounds_executed(int): Recovery rounds run.
        round_saving(float): 1 - rounds_executed / T.
        storage(dict): Stored entry accounting.
        bound_checks(list): BoundCheck per recovery round.
    """
    name: str
    test_accuracy: float
    asr: float
    misr: float
    runtimes: List[float] = field(default_factory=list)
    rounds_executed: int = 0
    round_saving: float = 0.0
    rollback_index: Optional[int] = None
    storage: Dict[str, float] = field(default_factory=dict)
    bound_checks: List[BoundCheck] = field(default_factory=list)
    constants: Optional[BoundConstants] = None

    @property
    def bound_pass_rate(self):
        if not self.bound_checks:
            return None
        passed = sum(c.passed for c in self.bound_checks)
        return passed / len(self.bound_checks)

    def to_dict(self):
        return {"name": self.name,
                "test_accuracy": self.test_accuracy,
                "asr": self.asr,
                "misr": self.misr,
                "misr_kind": MISR_LABEL,
                "runtimes": self.runtimes,
                "mean_round_wall_time": float(np.mean(self.runtimes))
                if self.runtimes else 0.0,
                "rounds_executed": self.rounds_executed,
                "round_saving": self.round_saving,
                "rollback_index": self.rollback_index,
                "storage": self.storage,
                "bound_pass_rate": self.bound_pass_rate,
                "bound_checks": [c.to_dict() for c in self.bound_checks],
                "constants": None if self.constants is None
                else self.constants.to_dict()}


#############################################################
#                           Metrics                         #
#############################################################


def test_accuracy(model, arch, testset):
    """
    Share of test samples whose argmax prediction equals the label.
    """
    if len(testset) == 0:
        raise EmptyInputError("test_accuracy needs a non-empty testset")
    predicted = predict_labels(model, arch, testset.features)
    return float(np.mean(predicted == testset.labels))


def attack_success_rate(model, arch, testset, trigger, target_label):
    """
    Share of triggered test samples classified as `target_label`.
    """
    if len(testset) == 0:
        raise EmptyInputError("attack_success_rate needs a non-empty testset")
    triggered = embed_trigger(testset.features, trigger)
    predicted = predict_labels(model, arch, triggered)
    return float(np.mean(predicted == target_label))


def membership_inference_rate(model, arch, members, non_members):
    """
    Loss-threshold membership inference. The threshold is the median
    per-sample loss of both sets pooled; a sample is called a member when
    its loss is below it.

    Returns:
        float: Balanced accuracy of the attack, 0.5 is chance.
    """
    if len(members) == 0 or len(non_members) == 0:
        raise EmptyInputError("Membership inference needs both sets "
                              "non-empty")
    member_loss = per_sample_loss(model, arch, members)
    outsider_loss = per_sample_loss(model, arch, non_members)
    cut = float(np.median(np.concatenate([member_loss, outsider_loss])))
    true_positive = float(np.mean(member_loss < cut))
    true_negative = float(np.mean(outsider_loss >= cut))
    return 0.5 * (true_positive + true_negative)


def round_saving(stored_rounds, rollback_index, rounds):
    """
    1 - (T' - j*) / T.
    """
    if rounds < 1:
        raise ContractViolationError("round_saving needs T >= 1")
    return 1.0 - (stored_rounds - rollback_index) / rounds


def storage_accounting(store, rounds, num_clients, interval=None,
                       initial_loss=None, final_loss=None):
    """
    Stored per-client entries against the full-history and interval stores.

    Returns:
        dict: Entry counts, the selective storage bound and ratios.
    """
    cfg = store.config
    bound = fraction_count(cfg.round_ratio, rounds) \
        * fraction_count(cfg.client_ratio, num_clients)
    full = rounds * num_clients
    entries = store.stored_entry_count()
    accounting = {"stored_rounds": len(store),
                  "stored_entries": entries,
                  "entry_bound": bound,
                  "full_history_entries": full,
                  "stored_fraction": entries / full,
                  "windows": len(store.windows)}
    if interval:
        accounting["interval_entries"] = (rounds // interval) * num_clients
    if initial_loss and final_loss is not None:
        gamma = 1.0 - final_loss / initial_loss
        if 0.0 < gamma < 1.0 and 0.0 < cfg.alpha < 1.0:
            accounting["expected_windows"] = window_count(gamma, cfg.alpha)
    return accounting


#############################################################
#                   Bound constant estimation               #
#############################################################


def estimate_smoothness(grad_fn, points, rng, probes=PERTURBATION_PAIRS,
                        scale=PERTURBATION_SCALE):
    """
    Secant estimate of the smoothness constant, times the safety factor.

    Args:
        grad_fn(callable): Parameter vector -> gradient vector.
        points(list): Trajectory of parameter vectors.
        rng(numpy.random.Generator): Source of the perturbation pairs.
        probes(int): Random perturbation pairs added to the consecutive ones.
        scale(float): Length of each perturbation.

    Returns:
        float: 1.1 * max |grad(M) - grad(M')| / |M - M'|.

    Raises:
        EstimationError: If every trajectory point is the same.
    """
    points = [np.asarray(p, dtype=np.float64) for p in points]
    if len(points) < 2:
        raise EstimationError("Smoothness needs at least two trajectory "
                              "points")
    gradients = [grad_fn(p) for p in points]
    ratios = []
    for i in range(len(points) - 1):
        step = np.linalg.norm(points[i + 1] - points[i])
        if step > 0.0:
            ratios.append(np.linalg.norm(gradients[i + 1] - gradients[i])
                          / step)
    if not ratios:
        raise EstimationError("Degenerate trajectory: all models are equal")
    for _ in range(probes):
        i = int(rng.integers(len(points)))
        direction = rng.normal(size=points[i].shape)
        direction *= scale / np.linalg.norm(direction)
        moved = grad_fn(points[i] + direction)
        ratios.append(np.linalg.norm(moved - gradients[i]) / scale)
    return SAFETY_FACTOR * float(max(ratios))


def gradient_bound(norms):
    """
    1.1 * the largest observed gradient norm.

    Raises:
        EstimationError: If no norm is positive.
    """
    largest = max((float(n) for n in norms), default=0.0)
    if not largest > 0.0:
        raise EstimationError("All observed gradients are zero")
    return SAFETY_FACTOR * largest


def estimate_constants(trajectory, datasets, arch, learning_rate, rounds,
                       stored_rounds, rollback_index, f_init, f_star,
                       renewal_norms=(), seed=0):
    """
    Estimate (L, G) from models seen during training and recovery.

    Args:
        trajectory(list): Models to probe (at least two distinct).
        datasets(dict): Benign client id to dataset.
        arch(ModelArch): Model architecture.
        learning_rate(float): eta.
        rounds(int): T.
        stored_rounds(int): T'.
        rollback_index(int): j*.
        f_init(float): F(M~_0).
        f_star(float): Lowest loss reached by a long benign retrain.
        renewal_norms(iterable): |U^_r^c| seen during recovery; divided by
                                 eta they are gradient norms too.
        seed(int): Seed of the perturbation pairs.

    Returns:
        BoundConstants: The estimated constants.
    """
    if not datasets:
        raise EmptyInputError("estimate_constants needs benign datasets")
    pooled = Dataset.concat([datasets[c] for c in sorted(datasets)], "benign")
    smoothness = estimate_smoothness(
        lambda m: gradient(m, arch, pooled), trajectory,
        np.random.default_rng(seed))
    norms = [np.linalg.norm(gradient(m, arch, datasets[c]))
             for m in trajectory for c in sorted(datasets)
             if len(datasets[c])]
    norms.extend(n / learning_rate for n in renewal_norms)
    constants = BoundConstants(L=smoothness, G=gradient_bound(norms),
                               f_init=float(f_init),
                               f_star=float(min(f_star, f_init)),
                               learning_rate=learning_rate, rounds=rounds,
                               stored_rounds=stored_rounds,
                               rollback_index=rollback_index)
    log_obj.info(f"Bound constants: L={constants.L:.4f}, "
                 f"G={constants.G:.4f}, F_init={constants.f_init:.6f}, "
                 f"F_star={constants.f_star:.6f}")
    return constants


#############################################################
#                        Bound audit                        #
#############################################################


def bound_rhs(constants, r, tau, sigma_square_sum):
    eta = constants.learning_rate
    gap = constants.f_init - constants.f_star
    inner = gap * (r + tau) + 0.5 * constants.L * eta ** 2 \
        * constants.G ** 2 * (r * sigma_square_sum + tau)
    return math.sqrt(max(0.0, eta * inner))


def audit_recovery_bound(trace, scratch, constants):
    """
    Audit |M~_r - M_tau| <= RHS(r) for every recovery round, with
    tau = ceil(r * T / (T' - j*)) indexing the benign from-scratch run.

    Args:
        trace(RecoveryTrace): Recovery to audit.
        scratch(RecoveryTrace): Benign FedAvg from the same M~_0.
        constants(BoundConstants): Estimated constants.

    Returns:
        list: BoundCheck for r = 0 .. R.
    """
    if len(trace.models) != len(trace.rounds) + 1:
        raise ContractViolationError("Recovery trace is missing sigma values")
    if not np.array_equal(trace.initial_model, scratch.initial_model):
        raise ContractViolationError(
            "Recovery and scratch traces start from different models")
    span = constants.stored_rounds - constants.rollback_index
    if span != len(trace.rounds):
        raise ContractViolationError(
            f"Trace of {len(trace.rounds)} rounds for T' - j* = {span}")
    last = len(scratch.models) - 1
    checks = []
    sigma_square_sum = 0.0
    for r, model in enumerate(trace.models):
        tau = 0 if span == 0 else \
            int(math.ceil(round(r * constants.rounds / span, 9)))
        clamped = tau > last
        if clamped:
            log_obj.info(f"tau={tau} beyond the scratch run, using M_{last}")
        lhs = float(np.linalg.norm(model - scratch.models[min(tau, last)]))
        rhs = bound_rhs(constants, r, tau, sigma_square_sum)
        checks.append(BoundCheck(r=r, tau=tau, lhs=lhs, rhs=rhs,
                                 passed=lhs <= rhs + 1e-12, clamped=clamped))
        if r < len(trace.rounds):
            sigma_square_sum += trace.rounds[r].sigma_sum ** 2
    failed = [c.r for c in checks if not c.passed]
    if failed:
        log_obj.warning(f"Bound violated at recovery rounds {failed}")
    return checks


#############################################################
#                       Report assembly                     #
#############################################################


def evaluate_model(name, model, arch, testset, members, non_members,
                   trigger=None, target_label=0):
    """
    MetricsReport with the three model-quality rates filled in.
    """
    asr = attack_success_rate(model, arch, testset, trigger, target_label) \
        if trigger is not None else 0.0
    return MetricsReport(
        name=name, test_accuracy=test_accuracy(model, arch, testset),
        asr=asr,
        misr=membership_inference_rate(model, arch, members, non_members))


def round_rows(trace, arch, testset, trigger=None, target_label=0,
               checks=None):
    """
    Flat per-round rows: round, loss, accuracy, asr, lhs, rhs, runtime_ms.
    """
    by_round = {c.r: c for c in checks or []}
    rows = []
    for r, log_round in enumerate(trace.rounds):
        model = trace.models[r + 1]
        check = by_round.get(r + 1)
        rows.append({
            "round": r,
            "loss": log_round.loss,
            "accuracy": test_accuracy(model, arch, testset),
            "asr": attack_success_rate(model, arch, testset, trigger,
                                       target_label)
            if trigger is not None else "",
            "lhs": check.lhs if check else "",
            "rhs": check.rhs if check else "",
            "runtime_ms": 1000.0 * log_round.wall_time})
    return rows
