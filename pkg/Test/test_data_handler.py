import gzip
import struct

import numpy as np
import pytest

from Scripts import evaluation
from Scripts.data_handler import (IMAGES_MAGIC, LABELS_MAGIC, SyntheticSpec,
                                  gen_synthetic, load_idx, partition_iid,
                                  split_disjoint)
from Scripts.error_handler import (ArtifactIOError, ConfigError,
                                   IdxBadMagicError, IdxCountMismatchError,
                                   IdxLabelRangeError, IdxTruncatedError)
from Scripts.numerics import LocalTrainConfig, ModelArch, local_train

PIXELS = bytes([0, 128, 255, 0, 255, 255, 128, 0])


def _images(count=2, rows=2, cols=2, payload=PIXELS, magic=IMAGES_MAGIC):
    return struct.pack(">4I", magic, count, rows, cols) + payload


def _labels(values=(3, 7), magic=LABELS_MAGIC, count=None):
    count = len(values) if count is None else count
    return struct.pack(">2I", magic, count) + bytes(values)


@pytest.fixture
def idx_files(tmp_path):
    def write(images=None, labels=None, compress=False):
        suffix = ".gz" if compress else ""
        opener = gzip.open if compress else open
        paths = (str(tmp_path / f"images{suffix}"),
                 str(tmp_path / f"labels{suffix}"))
        for path, payload in zip(paths, (images or _images(),
                                         labels or _labels())):
            with opener(path, "wb") as f:
                f.write(payload)
        return paths
    return write


@pytest.mark.parametrize("compress", [False, True])
def test_load_two_images(idx_files, compress):
    data = load_idx(*idx_files(compress=compress))

    assert data.features.shape == (2, 4)
    assert data.features[0].tolist() == pytest.approx(
        [0.0, 128 / 255, 1.0, 0.0])
    assert data.features[1].tolist() == pytest.approx(
        [1.0, 1.0, 128 / 255, 0.0])
    assert data.labels.tolist() == [3, 7]


def test_load_first_sample_only(idx_files):
    data = load_idx(*idx_files(), max_samples=1)

    assert len(data) == 1
    assert data.labels.tolist() == [3]


def test_bad_image_magic(idx_files):
    with pytest.raises(IdxBadMagicError):
        load_idx(*idx_files(images=_images(magic=0x00000801)))


def test_bad_label_magic(idx_files):
    with pytest.raises(IdxBadMagicError):
        load_idx(*idx_files(labels=_labels(magic=0x00000803)))


def test_truncated_pixels(idx_files):
    with pytest.raises(IdxTruncatedError):
        load_idx(*idx_files(images=_images(payload=PIXELS[:-1])))


def test_truncated_header(idx_files):
    with pytest.raises(IdxTruncatedError):
        load_idx(*idx_files(images=struct.pack(">2I", IMAGES_MAGIC, 2)))


def test_count_mismatch(idx_files):
    with pytest.raises(IdxCountMismatchError):
        load_idx(*idx_files(labels=_labels(values=(1, 2, 3))))


def test_label_outside_digit_range(idx_files):
    with pytest.raises(IdxLabelRangeError) as error:
        load_idx(*idx_files(labels=_labels(values=(3, 12))))

    assert error.value.exit_code == 2


def test_missing_file(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_idx(str(tmp_path / "none"), str(tmp_path / "none-either"))


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(num_classes=3, input_dim=5, samples_per_class=10,
                         pattern_size=1, separation=1.0, seed=4)

    first, second = gen_synthetic(spec), gen_synthetic(spec)

    assert np.array_equal(first.features, second.features)
    assert np.array_equal(first.labels, second.labels)
    assert len(first) == 30
    assert np.all((first.features >= 0.0) & (first.features <= 1.0))
    assert np.bincount(first.labels).tolist() == [10, 10, 10]


def test_default_patterns_leave_the_trigger_corner_alone():
    spec = SyntheticSpec()
    data = gen_synthetic(spec)
    images = data.features.reshape(-1, 28, 28)

    assert spec.intensity == pytest.approx(10.0 / 16.0 * np.sqrt(2.0))
    assert images[:, 24:, 24:].mean() < 0.05
    for k in range(spec.num_classes):
        block = data.features[data.labels == k,
                              k * spec.pattern_size:
                              (k + 1) * spec.pattern_size]
        assert block.mean() == pytest.approx(spec.intensity, abs=0.01)


@pytest.mark.parametrize("kwargs", [
    {"input_dim": 2, "num_classes": 3}, {"samples_per_class": 0},
    {"separation": -1.0}, {"noise_std": 0.0}, {"pattern_size": 0},
    {"pattern_size": 80}, {"separation": 12.0},
])
def test_invalid_synthetic_spec(kwargs):
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(**kwargs))


def _fit(spec, epochs=60):
    data = gen_synthetic(spec)
    train, test = split_disjoint(data, [len(data) // 2, len(data) // 2],
                                 seed=1)
    arch = ModelArch("logreg", spec.input_dim, 0, spec.num_classes)
    cfg = LocalTrainConfig(epochs=epochs, learning_rate=1.0, batch_size=16,
                           rng_seed=2)
    model = local_train(np.zeros(arch.param_count), arch, train, cfg)
    return evaluation.test_accuracy(model, arch, test)


def test_separated_clusters_are_learnable():
    spec = SyntheticSpec(num_classes=3, input_dim=4, samples_per_class=100,
                         pattern_size=1, separation=0.8, seed=0)

    assert _fit(spec) >= 0.95


def test_overlapping_clusters_are_at_chance():
    spec = SyntheticSpec(num_classes=3, input_dim=4, samples_per_class=200,
                         pattern_size=1, separation=0.0, seed=0)

    assert _fit(spec, epochs=5) == pytest.approx(1.0 / 3.0, abs=0.1)


def test_split_is_disjoint(toy_data):
    pieces = split_disjoint(toy_data, [30, 20, 10], seed=9)

    rows = np.concatenate([p.features for p in pieces])
    assert [len(p) for p in pieces] == [30, 20, 10]
    assert len({tuple(r) for r in rows}) == 60


def test_split_beyond_pool(toy_data):
    with pytest.raises(ConfigError):
        split_disjoint(toy_data, [50, 11], seed=0)


def test_partition_covers_the_data(toy_data):
    shards = partition_iid(toy_data, 7, seed=2)

    assert sorted(shards) == list(range(1, 8))
    assert sum(len(d) for d in shards.values()) == len(toy_data)
    assert max(len(d) for d in shards.values()) \
        - min(len(d) for d in shards.values()) <= 1
    assert shards[3].owner == "client-3"


def test_partition_needs_a_sample_per_client(toy_data):
    with pytest.raises(ConfigError):
        partition_iid(toy_data, len(toy_data) + 1, seed=0)
