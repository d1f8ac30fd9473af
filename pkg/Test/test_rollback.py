import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from Scripts.error_handler import ContractViolationError, EmptyInputError
from Scripts.history_store import HistoryStore, RoundRecord, StorageConfig
from Scripts.numerics import Dataset, ModelArch
from Scripts.orchestrator import aggregate
from Scripts.rollback import (INITIAL, analyze_rollback, influence,
                              rollback_label, rollback_sweep,
                              select_rollback, sensitivity, threshold)

SMALL_ARCH = ModelArch("logreg", input_dim=1, hidden_dim=0, num_classes=2)
SMALL_REFSET = Dataset(np.array([[0.0], [1.0]]), np.array([0, 1]), "refset")

client_entries = st.tuples(
    st.lists(st.floats(-2.0, 2.0), min_size=4, max_size=4),
    st.integers(1, 9))
histories = st.lists(
    st.dictionaries(st.integers(1, 6), client_entries, min_size=1,
                    max_size=6),
    min_size=1, max_size=6)
malicious_sets = st.sets(st.integers(1, 6), max_size=3)
betas = st.floats(0.01, 1.0)


def _store_from(history, rename=None):
    rename = rename or {}
    config = StorageConfig(alpha=0.1, round_ratio=1.0, client_ratio=1.0,
                           refset=SMALL_REFSET)
    store = HistoryStore(config, SMALL_ARCH)
    for t, clients in enumerate(history):
        updates = {rename.get(c, c): np.array(u, dtype=np.float64)
                   for c, (u, _) in clients.items()}
        sizes = {rename.get(c, c): n for c, (_, n) in clients.items()}
        agg = aggregate(updates, sizes)
        store.records.append(RoundRecord(
            round=t, model=agg.copy(), client_ids=tuple(sorted(updates)),
            updates=updates, aggregate=agg, sizes=sizes))
    return store


def _vec(first, second=0.0):
    return [first, second, 0.0, 0.0]


def test_influence_of_empty_subset(make_record):
    record = make_record(0, {1: _vec(1.0), 2: _vec(2.0)})

    assert np.all(influence(record, np.ones(4), []) == 0.0)


def test_influence_without_deviation(make_record):
    record = make_record(0, {1: _vec(3.0, 1.0)})

    assert np.all(influence(record, np.array(_vec(3.0, 1.0)), [1]) == 0.0)


def test_influence_two_clients(make_record):
    record = make_record(0, {1: [2.0, 0, 0, 0], 2: [0.0, 0, 0, 0]})

    result = influence(record, np.array(_vec(1.0)), [1, 2])

    assert np.allclose(result, 0.0)


def test_influence_rejects_unstored_client(make_record):
    record = make_record(0, {1: _vec(1.0)})

    with pytest.raises(ContractViolationError):
        influence(record, np.zeros(4), [1, 5])


@pytest.fixture
def gap_store(tiny_store, make_record):
    """
    Client 1 is malicious; its stored deviation from client 2 gives
    per-round gaps 0.3 and 0.4.
    """
    tiny_store.records = [
        make_record(0, {1: _vec(0.6), 2: _vec(0.0)}),
        make_record(1, {1: _vec(1.0), 2: _vec(0.2)}),
    ]
    return tiny_store


def test_sensitivity_is_prefix_sum(gap_store):
    assert np.allclose(sensitivity(gap_store, {1}), [0.3, 0.7])


def test_sensitivity_without_malicious_clients(gap_store):
    assert sensitivity(gap_store, set()) == [0.0, 0.0]
    assert sensitivity(gap_store, {9}) == [0.0, 0.0]


def test_sensitivity_of_empty_store(tiny_store):
    with pytest.raises(EmptyInputError):
        sensitivity(tiny_store, {1})


@pytest.fixture
def benign_store(tiny_store, make_record):
    """
    Single benign client whose deviations have norms 1.0 and 0.5.
    """
    tiny_store.records = [
        make_record(0, {2: _vec(1.0)}),
        make_record(1, {2: _vec(1.0, 0.5)}),
    ]
    return tiny_store


def test_threshold_is_scaled_prefix_sum(benign_store):
    assert np.allclose(threshold(benign_store, {1}, 0.3), [0.3, 0.45])


def test_threshold_is_linear_in_beta(benign_store):
    single = threshold(benign_store, set(), 0.25)
    double = threshold(benign_store, set(), 0.5)

    assert np.allclose(double, 2.0 * np.array(single))


def test_threshold_with_zero_benign_influence(tiny_store, make_record):
    tiny_store.records = [make_record(0, {2: _vec(0.0)}),
                          make_record(1, {2: _vec(0.0)})]

    assert threshold(tiny_store, set(), 0.3) == [0.0, 0.0]


@pytest.mark.parametrize("beta", [0.0, 1.5])
def test_threshold_rejects_beta(benign_store, beta):
    with pytest.raises(ContractViolationError):
        threshold(benign_store, set(), beta)


@pytest.mark.parametrize("s, phi, expected", [
    ([0.0, 0.0, 0.0], [0.0, 0.1, 0.2], 3),
    ([0.5, 0.6], [0.1, 0.2], INITIAL),
    ([0.1, 0.2, 0.9], [0.3, 0.3, 0.3], 2),
])
def test_select_rollback(s, phi, expected):
    assert select_rollback(s, phi) == expected


def test_select_rollback_needs_equal_lengths():
    with pytest.raises(ContractViolationError):
        select_rollback([0.1], [0.1, 0.2])


def test_rollback_label():
    assert rollback_label(INITIAL) == "initial"
    assert rollback_label(3) == 3


def test_sensitivity_and_threshold_never_decrease(tiny_store, make_record):
    rng = np.random.default_rng(12)
    tiny_store.records = [
        make_record(t, {c: rng.normal(size=4) for c in (1, 2, 3)},
                    sizes={1: 5, 2: 3, 3: 8})
        for t in range(8)]

    report = analyze_rollback(tiny_store, {2}, 0.3)

    assert np.all(np.diff(report.sensitivity) >= 0.0)
    assert np.all(np.diff(report.threshold) >= 0.0)
    assert 0 <= report.rollback_index <= 8


def test_rollback_sweep(gap_store):
    sweep = rollback_sweep(gap_store, {1}, [0.1, 1.0])

    assert set(sweep) == {0.1, 1.0}
    assert sweep[1.0] >= sweep[0.1]


@settings(max_examples=200, deadline=None)
@given(histories)
def test_sensitivity_ignores_benign_relabelling(history):
    # Client 1 is malicious; benign ids 2..6 are reversed onto 18..14.
    renamed = _store_from(history, {c: 20 - c for c in range(2, 7)})

    assert sensitivity(renamed, {1}) == pytest.approx(
        sensitivity(_store_from(history), {1}), rel=1e-9, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(histories, malicious_sets, betas, betas)
def test_rollback_index_grows_with_beta(history, malicious, first, second):
    low, high = sorted((first, second))
    store = _store_from(history)

    assert analyze_rollback(store, malicious, low).rollback_index \
        <= analyze_rollback(store, malicious, high).rollback_index


@settings(max_examples=200, deadline=None)
@given(histories, malicious_sets, betas)
def test_rollback_index_is_the_last_admissible(history, malicious, beta):
    report = analyze_rollback(_store_from(history), malicious, beta)
    j_star = report.rollback_index

    if j_star != INITIAL:
        assert report.sensitivity[j_star - 1] <= report.threshold[j_star - 1]
    for later in range(j_star, len(history)):
        assert report.sensitivity[later] > report.threshold[later]
