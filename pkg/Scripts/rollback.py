# Crab rollback module

# Description: Adaptive model rollback. For each stored round the influence
#              of the stored client set is compared with and without the
#              detected malicious clients; the cumulative gap (sensitivity)
#              is held against a beta-scaled cumulative benign influence and
#              the latest stored model still under that threshold becomes
#              the starting point of recovery.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

from dataclasses import dataclass, field
from typing import List

import numpy as np

from .error_handler import ContractViolationError, EmptyInputError
from .logging_handler import log_obj

# j* = 0 rolls back to the initial model M_0; j* = k >= 1 to the model
# stored by the k-th record.
INITIAL = 0


def rollback_label(j_star):
    return "initial" if j_star == INITIAL else j_star


@dataclass
class SensitivityReport:
    """
    Per stored index j (1-based): the influence norms behind S and Phi, the
    cumulative sensitivity S(C_u, j), the threshold Phi(j), and the chosen
    rollback index.
    """
    beta: float
    malicious_ids: List[int]
    influence_norms: List[float] = field(default_factory=list)
    benign_norms: List[float] = field(default_factory=list)
    gap_norms: List[float] = field(default_factory=list)
    sensitivity: List[float] = field(default_factory=list)
    threshold: List[float] = field(default_factory=list)
    rollback_index: int = INITIAL

    def to_dict(self):
        return {"beta": self.beta, "malicious_ids": self.malicious_ids,
                "influence_norms": self.influence_norms,
                "benign_norms": self.benign_norms,
                "gap_norms": self.gap_norms,
                "sensitivity": self.sensitivity,
                "threshold": self.threshold,
                "rollback_index": rollback_label(self.rollback_index)}


def influence(record, prev_aggregate, client_subset):
    """
    Size-weighted sum of the subset's deviations from the previous stored
    aggregated update.

    Args:
        record(RoundRecord): Stored round t_j.
        prev_aggregate(ndarray): Aggregated update of stored round t_{j-1}
                                 (zero vector before the first one).
        client_subset(iterable): Clients of `record`, may be empty.

    Returns:
        ndarray: The influence vector; zeros for an empty subset.
    """
    subset = sorted(set(client_subset))
    missing = [c for c in subset if c not in record.updates]
    if missing:
        raise ContractViolationError(
            f"Clients {missing} are not stored for round {record.round}")
    result = np.zeros_like(prev_aggregate, dtype=np.float64)
    if not subset:
        return result
    total = float(sum(record.sizes[c] for c in subset))
    for client in subset:
        result += (record.sizes[client] / total) \
            * (record.updates[client] - prev_aggregate)
    return result


def _influence_norms(store, malicious_ids):
    """
    Yields (|I(C)|, |I(C-)|, |I(C) - I(C-)|) for every stored record.
    """
    malicious_ids = set(malicious_ids)
    prev = np.zeros(store.arch.param_count, dtype=np.float64)
    for record in store.records:
        everyone = set(record.client_ids)
        benign = everyone - malicious_ids
        full = influence(record, prev, everyone)
        if everyone & malicious_ids:
            without = influence(record, prev, benign)
            gap = float(np.linalg.norm(full - without))
        else:
            without = full
            gap = 0.0
        yield float(np.linalg.norm(full)), float(np.linalg.norm(without)), gap
        prev = record.aggregate


def sensitivity(store, malicious_ids):
    """
    S(C_u, j): cumulative l2 gap between the influence of each stored client
    set with and without the malicious clients. Rounds that stored no
    malicious client add exactly 0.

    Returns:
        list: S(C_u, 1) .. S(C_u, T').
    """
    if len(store) == 0:
        raise EmptyInputError("sensitivity needs a non-empty history store")
    gaps = [gap for _, _, gap in _influence_norms(store, malicious_ids)]
    return np.cumsum(gaps).tolist()


def threshold(store, malicious_ids, beta):
    """
    Phi(j) = beta * cumulative l2 norm of the benign influence.
    """
    if not 0.0 < beta <= 1.0:
        raise ContractViolationError(f"beta must lie in (0, 1], got {beta}")
    if len(store) == 0:
        raise EmptyInputError("threshold needs a non-empty history store")
    norms = [benign for _, benign, _ in _influence_norms(store,
                                                         malicious_ids)]
    return (beta * np.cumsum(norms)).tolist()


def select_rollback(sensitivity_seq, threshold_seq):
    """
    The largest stored index j with S(j) <= Phi(j).

    Args:
        sensitivity_seq(list): S(C_u, 1..T').
        threshold_seq(list): Phi(1..T').

    Returns:
        int: 1-based stored index, or INITIAL if no index qualifies.
    """
    if len(sensitivity_seq) != len(threshold_seq):
        raise ContractViolationError(
            f"{len(sensitivity_seq)} sensitivities against "
            f"{len(threshold_seq)} thresholds")
    if not sensitivity_seq:
        raise ContractViolationError("select_rollback needs at least one "
                                     "stored round")
    for j in range(len(sensitivity_seq), 0, -1):
        if sensitivity_seq[j - 1] <= threshold_seq[j - 1]:
            return j
    return INITIAL


def analyze_rollback(store, malicious_ids, beta):
    """
    Build the SensitivityReport and choose the rollback index j*.
    """
    if not 0.0 < beta <= 1.0:
        raise ContractViolationError(f"beta must lie in (0, 1], got {beta}")
    if len(store) == 0:
        raise EmptyInputError("Rollback analysis needs stored rounds")
    report = SensitivityReport(beta=beta,
                               malicious_ids=sorted(malicious_ids))
    for full, benign, gap in _influence_norms(store, malicious_ids):
        report.influence_norms.append(full)
        report.benign_norms.append(benign)
        report.gap_norms.append(gap)
    report.sensitivity = np.cumsum(report.gap_norms).tolist()
    report.threshold = (beta * np.cumsum(report.benign_norms)).tolist()
    report.rollback_index = select_rollback(report.sensitivity,
                                            report.threshold)
    log_obj.info(f"Rollback point j*={rollback_label(report.rollback_index)} "
                 f"of {len(store)} stored rounds (beta={beta})")
    return report


def rollback_sweep(store, malicious_ids, betas):
    """
    j* for several sensitivity ratios.

    Returns:
        dict: beta to rollback index.
    """
    return {beta: analyze_rollback(store, malicious_ids, beta).rollback_index
            for beta in betas}
