# Crab numerics module

# Description: Differentiable classifiers used by every federated client:
#              multinomial logistic regression and a one-hidden-layer tanh
#              MLP, mean cross-entropy loss, hand-derived gradients and local
#              mini-batch SGD. Models travel through the system as flat
#              float64 parameter vectors.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from .error_handler import ContractViolationError, EmptyInputError

ParamVector = NDArray[np.float64]

ARCH_KINDS = ("logreg", "mlp1")
INIT_SCALE = 0.05


@dataclass(frozen=True)
class ModelArch:
    """
    Shape of a classifier.

    Attributes:
        kind(str): "logreg" or "mlp1".
        input_dim(int): Width of a feature row.
        hidden_dim(int): Hidden units of mlp1, 0 for logreg.
        num_classes(int): Number of output classes, at least 2.

    Usage:
        arch = ModelArch("mlp1", input_dim=784, hidden_dim=32,
                         num_classes=10)
        model = init_model(arch, seed=7)
    """
    kind: str
    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ContractViolationError(f"Unknown model kind: {self.kind}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ContractViolationError(
                "input_dim must be >= 1 and num_classes >= 2, got "
                f"{self.input_dim} and {self.num_classes}")
        if self.kind == "logreg" and self.hidden_dim != 0:
            raise ContractViolationError("logreg takes hidden_dim = 0")
        if self.kind == "mlp1" and self.hidden_dim < 1:
            raise ContractViolationError("mlp1 needs hidden_dim >= 1")

    @property
    def param_count(self):
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == "logreg":
            return k * d + k
        return h * d + h + k * h + k

    def layer_shapes(self):
        """
        Returns:
            list: (name, shape) pairs in flat-vector order.
        """
        d, h, k = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == "logreg":
            return [("W", (k, d)), ("b", (k,))]
        return [("W1", (h, d)), ("b1", (h,)), ("W2", (k, h)), ("b2", (k,))]

    def to_dict(self):
        return {"kind": self.kind, "input_dim": self.input_dim,
                "hidden_dim": self.hidden_dim,
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, values):
        return cls(values["kind"], int(values["input_dim"]),
                   int(values["hidden_dim"]), int(values["num_classes"]))


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Labeled feature rows held by one owner (a client, the server reference
    set, a test split).

    Attributes:
        features(ndarray): (n, input_dim) float64 matrix, values in [0, 1].
        labels(ndarray): (n,) int64 class indices.
        owner(str): Free-form tag, e.g. "client-3" or "refset".
    """
    features: NDArray[np.float64]
    labels: NDArray[np.int64]
    owner: str = ""

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, 0)
        if features.ndim != 2:
            raise ContractViolationError("features must be a 2-D matrix")
        if labels.shape != (features.shape[0],):
            raise ContractViolationError(
                f"{features.shape[0]} feature rows but {labels.shape} labels")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def width(self):
        return int(self.features.shape[1])

    def subset(self, indices, owner=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices],
                       self.owner if owner is None else owner)

    def check_against(self, arch):
        if len(self) and self.width != arch.input_dim:
            raise ContractViolationError(
                f"Dataset '{self.owner}' has width {self.width}, model "
                f"expects {arch.input_dim}")
        if len(self) and (self.labels.min() < 0
                          or self.labels.max() >= arch.num_classes):
            raise ContractViolationError(
                f"Dataset '{self.owner}' has labels outside "
                f"[0, {arch.num_classes})")

    @staticmethod
    def concat(datasets, owner=""):
        datasets = [d for d in datasets if len(d)]
        if not datasets:
            raise EmptyInputError("Cannot concatenate zero samples")
        return Dataset(np.concatenate([d.features for d in datasets]),
                       np.concatenate([d.labels for d in datasets]), owner)


@dataclass(frozen=True)
class LocalTrainConfig:
    """
    Local SGD settings: E epochs, learning rate, batch size and the seed of
    the per-epoch batch permutation.
    """
    epochs: int = 5
    learning_rate: float = 0.005
    batch_size: int = 64
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 \
                or not self.learning_rate > 0:
            raise ContractViolationError(
                "LocalTrainConfig needs epochs >= 1, batch_size >= 1 and "
                "learning_rate > 0")

    def with_seed(self, seed):
        return LocalTrainConfig(self.epochs, self.learning_rate,
                                self.batch_size, int(seed))


#############################################################
#                     Helping functions                     #
#############################################################


def check_model(model, arch):
    if model.ndim != 1 or model.shape[0] != arch.param_count:
        raise ContractViolationError(
            f"Model has {model.shape} parameters, architecture "
            f"{arch.kind} needs {arch.param_count}")


def check_finite(vector, what="vector"):
    if not np.all(np.isfinite(vector)):
        raise ContractViolationError(f"{what} contains NaN or Inf")


def unpack_params(model, arch) -> Dict[str, NDArray[np.float64]]:
    """
    Split a flat parameter vector into named weight matrices (views).

    Args:
        model(ndarray): Flat parameter vector.
        arch(ModelArch): Architecture that fixes the layout.

    Returns:
        dict: Layer name to reshaped view of `model`.
    """
    check_model(model, arch)
    layers = {}
    offset = 0
    for name, shape in arch.layer_shapes():
        size = int(np.prod(shape))
        layers[name] = model[offset:offset + size].reshape(shape)
        offset += size
    return layers


def init_model(arch, seed):
    """
    Weights uniform in [-0.05, 0.05] drawn from `seed`; biases zero.
    """
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in arch.layer_shapes():
        if name.startswith("b"):
            parts.append(np.zeros(shape, dtype=np.float64).ravel())
        else:
            parts.append(rng.uniform(-INIT_SCALE, INIT_SCALE,
                                     size=shape).ravel())
    return np.concatenate(parts)


def _forward(model, arch, features) -> Tuple[NDArray, Optional[NDArray]]:
    layers = unpack_params(model, arch)
    if arch.kind == "logreg":
        return features @ layers["W"].T + layers["b"], None
    hidden = np.tanh(features @ layers["W1"].T + layers["b1"])
    return hidden @ layers["W2"].T + layers["b2"], hidden


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _as_matrix(features, arch):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(1, -1)
    if features.ndim != 2 or features.shape[1] != arch.input_dim:
        raise ContractViolationError(
            f"Feature rows of width {features.shape[-1]} given to a model "
            f"with input_dim {arch.input_dim}")
    return features


#############################################################
#                     Model operations                      #
#############################################################


def predict_proba_batch(model, arch, features):
    """
    Softmax outputs for every row of `features`.

    Returns:
        ndarray: (n, num_classes) matrix whose rows sum to 1.
    """
    features = _as_matrix(features, arch)
    logits, _ = _forward(model, arch, features)
    return np.exp(_log_softmax(logits))


def predict_proba(model, arch, features):
    """
    Class probabilities of a single feature row.

    Args:
        model(ndarray): Flat parameter vector.
        arch(ModelArch): Model architecture.
        features(ndarray): One row of length input_dim.

    Returns:
        ndarray: Probability vector of length num_classes.
    """
    row = np.asarray(features, dtype=np.float64)
    if row.ndim != 1:
        raise ContractViolationError("predict_proba takes a single row")
    return predict_proba_batch(model, arch, row)[0]


def predict_labels(model, arch, features):
    # argmax picks the lowest class index on ties
    return np.argmax(predict_proba_batch(model, arch, features), axis=1)


def per_sample_loss(model, arch, data):
    """
    Cross-entropy -log p(true class) of every sample.
    """
    if len(data) == 0:
        raise EmptyInputError(f"Dataset '{data.owner}' is empty")
    features = _as_matrix(data.features, arch)
    data.check_against(arch)
    logits, _ = _forward(model, arch, features)
    log_probs = _log_softmax(logits)
    return -log_probs[np.arange(len(data)), data.labels]


def loss(model, arch, data):
    """
    Mean cross-entropy of `model` on `data`.

    Raises:
        EmptyInputError: If `data` holds no samples.
    """
    return float(per_sample_loss(model, arch, data).mean())


def gradient(model, arch, batch):
    """
    Exact gradient of `loss` on `batch` with respect to the flat parameters.

    Args:
        model(ndarray): Flat parameter vector.
        arch(ModelArch): Model architecture.
        batch(Dataset): Non-empty batch.

    Returns:
        ndarray: Gradient vector, same layout as `model`.
    """
    if len(batch) == 0:
        raise EmptyInputError(f"Batch '{batch.owner}' is empty")
    features = _as_matrix(batch.features, arch)
    batch.check_against(arch)
    n = features.shape[0]
    logits, hidden = _forward(model, arch, features)
    delta = np.exp(_log_softmax(logits))
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    if arch.kind == "logreg":
        return np.concatenate([(delta.T @ features).ravel(),
                               delta.sum(axis=0)])
    layers = unpack_params(model, arch)
    grad_w2 = delta.T @ hidden
    grad_b2 = delta.sum(axis=0)
    # tanh' = 1 - tanh^2
    hidden_delta = (delta @ layers["W2"]) * (1.0 - hidden ** 2)
    grad_w1 = hidden_delta.T @ features
    grad_b1 = hidden_delta.sum(axis=0)
    return np.concatenate([grad_w1.ravel(), grad_b1, grad_w2.ravel(),
                           grad_b2])


def local_train(model, arch, data, cfg):
    """
    Run E epochs of mini-batch SGD starting at `model`.

    Batches follow a fresh permutation per epoch drawn from cfg.rng_seed;
    the last partial batch is kept.

    Args:
        model(ndarray): Starting parameters M_0.
        arch(ModelArch): Model architecture.
        data(Dataset): Local training set, non-empty.
        cfg(LocalTrainConfig): Epochs, learning rate, batch size, seed.

    Returns:
        ndarray: The update M_E - M_0.
    """
    if len(data) == 0:
        raise EmptyInputError(f"Dataset '{data.owner}' is empty")
    check_model(model, arch)
    rng = np.random.default_rng(cfg.rng_seed)
    current = model.copy()
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = data.subset(order[start:start + cfg.batch_size])
            current -= cfg.learning_rate * gradient(current, arch, batch)
    update = current - model
    check_finite(update, "local update")
    return update


def derive_seed(*parts):
    """
    Mix integer parts (master seed, client id, round, stream tag) into one
    64-bit seed. Independent of call order, so any scheduler reproduces it.
    """
    entropy = [int(part) & 0xFFFFFFFFFFFFFFFF for part in parts]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)
    return int(state[0])
