import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from Scripts import history_store
from Scripts.error_handler import (BlobLengthMismatchError,
                                   ContractViolationError, EmptyInputError,
                                   HistoryIOError, MalformedSnapshotError)
from Scripts.history_store import (BLOBS_FILE, MANIFEST_FILE, HistoryStore,
                                   IntervalHistory, WindowBuffer,
                                   close_window, contribution_score,
                                   kl_divergence, output_distribution,
                                   read_manifest, select_clients,
                                   window_count)
from Scripts.numerics import Dataset, ModelArch, predict_proba

distributions = st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=10).map(
    lambda w: np.array(w) / np.sum(w))
vectors = st.lists(st.floats(-10.0, 10.0), min_size=3, max_size=3).map(
    np.array)


def test_zero_model_output_is_uniform(logreg_arch, refset):
    p = output_distribution(np.zeros(logreg_arch.param_count), logreg_arch,
                            refset)

    assert np.allclose(p, 1.0 / 3.0)


def test_single_sample_refset_equals_predict_proba(mlp_arch):
    rng = np.random.default_rng(0)
    model = rng.normal(size=mlp_arch.param_count)
    row = rng.uniform(size=4)
    refset = Dataset(row.reshape(1, -1), np.array([0]))

    assert np.allclose(output_distribution(model, mlp_arch, refset),
                       predict_proba(model, mlp_arch, row), atol=1e-11)


def test_output_distribution_averages_rows():
    arch = ModelArch("logreg", 1, 0, 2)
    model = np.array([0.0, -math.log(9.0), 0.0, 0.0])
    refset = Dataset(np.array([[1.0], [0.0]]), np.array([0, 1]))

    assert np.allclose(output_distribution(model, arch, refset), [0.7, 0.3])


def test_output_distribution_of_empty_refset(logreg_arch):
    with pytest.raises(EmptyInputError):
        output_distribution(np.zeros(logreg_arch.param_count), logreg_arch,
                            Dataset(np.zeros((0, 4)), np.zeros(0)))


@pytest.mark.parametrize("p, q, expected", [
    ([0.5, 0.5], [0.5, 0.5], 0.0),
    ([1.0 - 1e-12, 1e-12], [0.5, 0.5], math.log(2.0)),
    ([0.8, 0.2], [0.6, 0.4], 0.09151),
])
def test_kl_examples(p, q, expected):
    assert kl_divergence(np.array(p), np.array(q)) == \
        pytest.approx(expected, abs=1e-4)


@settings(max_examples=1000, deadline=None)
@given(distributions, st.data())
def test_kl_is_non_negative(p, data):
    q = data.draw(st.lists(st.floats(1e-6, 1.0), min_size=len(p),
                           max_size=len(p)).map(
        lambda w: np.array(w) / np.sum(w)))

    assert kl_divergence(p, q) >= 0.0
    assert kl_divergence(p, p) == 0.0


@pytest.mark.parametrize("gamma, alpha, expected", [
    (0.1, 0.1, 1), (0.19, 0.1, 2), (0.5, 0.1, 6),
])
def test_window_count(gamma, alpha, expected):
    assert window_count(gamma, alpha) == expected


@pytest.mark.parametrize("g, G, expected", [
    ([1.0, 2.0], [1.0, 2.0], 1.0),
    ([1.0, 0.0], [0.0, 3.0], 0.0),
    ([1.0, 2.0], [2.0, 1.0], 0.8),
    ([0.0, 0.0], [2.0, 1.0], 0.0),
])
def test_contribution_score_examples(g, G, expected):
    assert contribution_score(np.array(g), np.array(G)) == \
        pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(vectors, vectors)
def test_contribution_score_is_bounded(g, G):
    assert -1.0 <= contribution_score(g, G) <= 1.0


def test_select_clients_keeps_most_aligned(make_outcome):
    outcome = make_outcome(0, {1: [1.0, 0.0], 2: [0.0, 1.0],
                               3: [0.0, -1.0], 4: [2.0, 0.5]},
                           model=[0.0, 0.0], loss=1.0)

    assert select_clients(outcome, 0.5) == (1, 4)


def _random_outcomes(arch, losses, clients=3, seed=0):
    rng = np.random.default_rng(seed)
    outcomes = []
    for t, value in enumerate(losses):
        updates = {c: rng.normal(size=arch.param_count)
                   for c in range(1, clients + 1)}
        outcomes.append((t, updates, rng.normal(size=arch.param_count),
                         value))
    return outcomes


def _buffer(make_outcome, arch, losses, seed=0):
    buffer = WindowBuffer(index=0, first_loss=2.0)
    for t, updates, model, value in _random_outcomes(arch, losses, seed=seed):
        buffer.entries.append(make_outcome(t, updates, model, value))
    return buffer


def test_close_window_without_selection(make_outcome, logreg_arch,
                                        storage_factory):
    buffer = _buffer(make_outcome, logreg_arch, [1.0, 0.9, 0.8])

    records = close_window(buffer, storage_factory(), logreg_arch)

    assert [r.round for r in records] == [0, 1, 2]
    for record, outcome in zip(records, buffer.entries):
        assert record.client_ids == (1, 2, 3)
        np.testing.assert_allclose(record.aggregate, outcome.aggregate,
                                   rtol=0, atol=1e-15)


def test_single_round_window_is_always_stored(make_outcome, logreg_arch,
                                              storage_factory):
    buffer = _buffer(make_outcome, logreg_arch, [1.0])

    records = close_window(buffer, storage_factory(round_ratio=0.1,
                                                   client_ratio=0.1),
                           logreg_arch)

    assert len(records) == 1 and len(records[0].client_ids) == 1


def test_close_window_keeps_highest_scores(make_outcome, logreg_arch,
                                           storage_factory, monkeypatch):
    scores = iter([0.5, 0.1, 0.3])
    monkeypatch.setattr(history_store, "kl_divergence",
                        lambda p, q: next(scores))
    buffer = _buffer(make_outcome, logreg_arch, [1.0, 0.9, 0.8])

    records = close_window(buffer, storage_factory(round_ratio=0.6),
                           logreg_arch)

    assert [r.round for r in records] == [0, 2]
    assert [r.kl_score for r in records] == [0.5, 0.3]


def test_close_window_respects_budget(make_outcome, logreg_arch,
                                      storage_factory):
    buffer = _buffer(make_outcome, logreg_arch, [1.0, 0.9, 0.8])

    assert close_window(buffer, storage_factory(), logreg_arch,
                        budget=0) == []


def _push_all(store, make_outcome, arch, losses, seed=0):
    store.begin(np.zeros(arch.param_count), 1.0, 3)
    closed = [store.push(make_outcome(t, updates, model, value))
              for t, updates, model, value
              in _random_outcomes(arch, losses, seed=seed)]
    store.finalize()
    return closed


def test_windows_partition_the_rounds(make_outcome, logreg_arch,
                                      storage_factory):
    store = HistoryStore(storage_factory(alpha=0.5, round_ratio=0.6),
                         logreg_arch)

    closed = _push_all(store, make_outcome, logreg_arch,
                       [0.9, 0.4, 0.35, 0.1, 0.09])

    assert closed == [False, True, False, True, False]
    assert [(w.first_round, w.last_round) for w in store.windows] == \
        [(0, 1), (2, 3), (4, 4)]
    assert [w.closed_by_threshold for w in store.windows] == \
        [True, True, False]
    assert len(store) == 3
    assert store.stored_entry_count() == 9


def test_unreachable_threshold_flushes_one_window(make_outcome, logreg_arch,
                                                  storage_factory):
    store = HistoryStore(storage_factory(alpha=0.999), logreg_arch)

    _push_all(store, make_outcome, logreg_arch, [0.9, 0.8, 0.7, 0.6])

    assert len(store.windows) == 1
    assert not store.windows[0].closed_by_threshold
    assert len(store) == 4


def test_push_rejects_out_of_order_rounds(make_outcome, logreg_arch,
                                          storage_factory):
    store = HistoryStore(storage_factory(alpha=0.5), logreg_arch)
    store.begin(np.zeros(logreg_arch.param_count), 1.0, 3)
    rounds = _random_outcomes(logreg_arch, [0.9, 0.8])
    t, updates, model, value = rounds[1]
    store.push(make_outcome(t, updates, model, value))

    with pytest.raises(ContractViolationError):
        store.push(make_outcome(t, updates, model, value))


def test_push_needs_begin(make_outcome, logreg_arch, storage_factory):
    store = HistoryStore(storage_factory(), logreg_arch)
    t, updates, model, value = _random_outcomes(logreg_arch, [0.9])[0]

    with pytest.raises(ContractViolationError):
        store.push(make_outcome(t, updates, model, value))


def test_interval_history_counts(make_outcome, logreg_arch, storage_factory):
    store = IntervalHistory(storage_factory(), logreg_arch, interval=2)

    _push_all(store, make_outcome, logreg_arch, [0.9, 0.8, 0.7, 0.6, 0.5])

    assert [r.round for r in store.records] == [1, 3]
    assert store.stored_entry_count() == 6


def test_empty_store_round_trip(tmp_path, logreg_arch, storage_factory):
    store = HistoryStore(storage_factory(), logreg_arch)

    store.persist(str(tmp_path / "h"))

    assert HistoryStore.load(str(tmp_path / "h")) == store


def test_one_record_round_trip(tmp_path, tiny_store, make_record):
    tiny_store.begin(np.zeros(4), 0.69, 2)
    tiny_store.records.append(make_record(0, {1: [0.1, 0.2, 0.3, 0.4]}))

    tiny_store.persist(str(tmp_path / "h"))

    assert HistoryStore.load(str(tmp_path / "h")) == tiny_store


@pytest.mark.parametrize("kind", ["selective", "interval"])
def test_random_store_round_trip(tmp_path, make_outcome, logreg_arch,
                                 storage_factory, kind):
    config = storage_factory(alpha=0.05, round_ratio=0.7, client_ratio=0.7)
    store = HistoryStore(config, logreg_arch) if kind == "selective" \
        else IntervalHistory(config, logreg_arch, interval=1)
    _push_all(store, make_outcome, logreg_arch,
              list(np.linspace(0.95, 0.2, 14)), seed=8)

    store.persist(str(tmp_path / "h"))
    loaded = HistoryStore.load(str(tmp_path / "h"))

    assert len(store) >= 10
    assert loaded == store
    assert type(loaded) is type(store)


def test_load_missing_snapshot(tmp_path):
    with pytest.raises(HistoryIOError):
        HistoryStore.load(str(tmp_path / "absent"))


def test_load_rejects_foreign_manifest(tmp_path, tiny_store):
    path = str(tmp_path / "h")
    tiny_store.persist(path)
    with open(os.path.join(path, MANIFEST_FILE), "w") as f:
        json.dump({"format": "other"}, f)

    with pytest.raises(MalformedSnapshotError):
        read_manifest(path)


def test_load_rejects_invalid_json(tmp_path, tiny_store):
    path = str(tmp_path / "h")
    tiny_store.persist(path)
    with open(os.path.join(path, MANIFEST_FILE), "w") as f:
        f.write("{not json")

    with pytest.raises(MalformedSnapshotError):
        HistoryStore.load(path)


def test_load_detects_truncated_blobs(tmp_path, tiny_store, make_record):
    path = str(tmp_path / "h")
    tiny_store.begin(np.zeros(4), 0.69, 2)
    tiny_store.records.append(make_record(0, {1: [0.1, 0.2, 0.3, 0.4]}))
    tiny_store.persist(path)
    blob_path = os.path.join(path, BLOBS_FILE)
    with open(blob_path, "rb") as f:
        payload = f.read()
    with open(blob_path, "wb") as f:
        f.write(payload[:-8])

    with pytest.raises(BlobLengthMismatchError):
        HistoryStore.load(path)
