# Crab data handler module

# Description: Data ingestion for experiments: a bit-exact reader for the
#              IDX container used by MNIST (optionally gzip compressed), a
#              synthetic Gaussian-cluster generator for runs without IDX
#              files, the disjoint train/test/reference split and the IID
#              partition of the training data across clients.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import gzip
import math
import struct
from dataclasses import dataclass

import numpy as np

from .error_handler import (ArtifactIOError, ConfigError, IdxBadMagicError,
                            IdxCountMismatchError, IdxLabelRangeError,
                            IdxTruncatedError)
from .logging_handler import log_obj
from .numerics import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
IDX_NUM_CLASSES = 10


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Isotropic Gaussian clusters, one per class, on a zero background. The
    mean of class k lights its own block of `pattern_size` consecutive
    coordinates. With the defaults the ten blocks fill the first 640 pixels
    of a 28x28 image and the bottom-right trigger corner holds only noise.

    Attributes:
        num_classes(int): Number of clusters.
        input_dim(int): Feature width, >= num_classes * pattern_size.
        samples_per_class(int): Samples drawn per cluster.
        pattern_size(int): Coordinates lit by each class mean.
        separation(float): Distance between any two cluster means, at most
                           sqrt(2 * pattern_size) so means stay in [0, 1].
        seed(int): Generator seed.
        noise_std(float): Per-coordinate standard deviation sigma.
    """
    num_classes: int = 10
    input_dim: int = 784
    samples_per_class: int = 300
    pattern_size: int = 64
    separation: float = 10.0
    seed: int = 0
    noise_std: float = 0.05

    @property
    def intensity(self):
        return self.separation / math.sqrt(2.0 * self.pattern_size)

    def validate(self):
        if min(self.num_classes, self.input_dim, self.samples_per_class,
               self.pattern_size) < 1 or self.separation < 0 \
                or not self.noise_std > 0:
            raise ConfigError("Synthetic spec values must be positive")
        if self.input_dim < self.num_classes * self.pattern_size:
            raise ConfigError(f"Synthetic input_dim {self.input_dim} cannot "
                              f"hold {self.num_classes} patterns of "
                              f"{self.pattern_size}")
        if self.intensity > 1.0:
            raise ConfigError(f"Separation {self.separation} puts the means "
                              f"outside [0, 1]; at most "
                              f"{math.sqrt(2.0 * self.pattern_size):.4f}")


#############################################################
#                         IDX reader                        #
#############################################################


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            return f.read()
    except OSError as os_error:
        raise ArtifactIOError(f"Cannot read IDX file {path}: {os_error}")


def _parse_header(payload, path, magic, dims):
    header_size = 4 * (1 + dims)
    if len(payload) < header_size:
        raise IdxTruncatedError(f"{path}: header shorter than "
                                f"{header_size} bytes")
    values = struct.unpack_from(f">{1 + dims}I", payload, 0)
    if values[0] != magic:
        raise IdxBadMagicError(f"{path}: magic 0x{values[0]:08x}, expected "
                               f"0x{magic:08x}")
    return values[1:], header_size


def load_idx(images_path, labels_path, max_samples=None):
    """
    Read an IDX image file and its label file.

    Args:
        images_path(str): IDX3 image file (magic 0x00000803).
        labels_path(str): IDX1 label file (magic 0x00000801).
        max_samples(int): Keep at most this many leading samples.

    Returns:
        Dataset: Pixels scaled to [0, 1] (byte / 255), rows flattened
                 row-major.

    Raises:
        IdxBadMagicError: Wrong magic number.
        IdxTruncatedError: Payload shorter than the header declares.
        IdxCountMismatchError: Image and label counts differ.
        IdxLabelRangeError: A label outside 0-9.
    """
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)
    (count, rows, cols), image_offset = _parse_header(
        image_bytes, images_path, IMAGES_MAGIC, 3)
    (label_count,), label_offset = _parse_header(
        label_bytes, labels_path, LABELS_MAGIC, 1)
    if count != label_count:
        raise IdxCountMismatchError(
            f"{count} images in {images_path} but {label_count} labels in "
            f"{labels_path}")
    if len(image_bytes) < image_offset + count * rows * cols:
        raise IdxTruncatedError(f"{images_path}: pixel payload truncated")
    if len(label_bytes) < label_offset + count:
        raise IdxTruncatedError(f"{labels_path}: label payload truncated")
    keep = count if max_samples is None else min(count, int(max_samples))
    pixels = np.frombuffer(image_bytes, dtype=np.uint8,
                           count=keep * rows * cols, offset=image_offset)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, count=keep,
                           offset=label_offset)
    if keep and int(labels.max()) >= IDX_NUM_CLASSES:
        raise IdxLabelRangeError(f"{labels_path}: label {int(labels.max())} "
                                 f"outside 0-{IDX_NUM_CLASSES - 1}")
    log_obj.info(f"Loaded {keep} of {count} IDX samples ({rows}x{cols}) "
                 f"from {images_path}")
    return Dataset(pixels.reshape(keep, rows * cols) / 255.0,
                   labels.astype(np.int64), "idx")


#############################################################
#                     Synthetic generator                   #
#############################################################


def gen_synthetic(spec):
    """
    Gaussian clusters around disjoint class patterns, features clipped to
    [0, 1]. Deterministic per seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    # Disjoint blocks of height s / sqrt(2B) are pairwise exactly s apart.
    means = np.zeros((spec.num_classes, spec.input_dim))
    for k in range(spec.num_classes):
        block = slice(k * spec.pattern_size, (k + 1) * spec.pattern_size)
        means[k, block] = spec.intensity
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    features = means[labels] + rng.normal(0.0, spec.noise_std,
                                          size=(labels.size, spec.input_dim))
    order = rng.permutation(labels.size)
    return Dataset(np.clip(features[order], 0.0, 1.0), labels[order],
                   "synthetic")


#############################################################
#                    Splitting and partition                #
#############################################################


def split_disjoint(data, sizes, seed):
    """
    Shuffle once and cut consecutive disjoint pieces of the given sizes.

    Returns:
        list: One Dataset per requested size.
    """
    if sum(sizes) > len(data):
        raise ConfigError(f"Requested {sum(sizes)} samples from a pool of "
                          f"{len(data)}")
    order = np.random.default_rng(seed).permutation(len(data))
    pieces = []
    start = 0
    for size in sizes:
        pieces.append(data.subset(order[start:start + size]))
        start += size
    return pieces


def partition_iid(data, num_clients, seed):
    """
    Seed-shuffled near-equal shards, one per client id 1..C.

    Returns:
        dict: Client id to Dataset.
    """
    if num_clients < 1 or len(data) < num_clients:
        raise ConfigError(f"Cannot give {num_clients} clients a sample each "
                          f"from {len(data)} samples")
    order = np.random.default_rng(seed).permutation(len(data))
    shards = np.array_split(order, num_clients)
    return {c + 1: data.subset(np.sort(shard), owner=f"client-{c + 1}")
            for c, shard in enumerate(shards)}
