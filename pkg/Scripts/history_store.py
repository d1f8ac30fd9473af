# Crab history store module

# Description: Selective storage of training history. Rounds are buffered
#              in loss-reduction time windows; when a window closes, the
#              rounds whose model output distribution moved the most (KL
#              divergence) are kept, and within each kept round only the
#              clients whose update points along the aggregated update
#              (cosine score). The store persists to a manifest.json plus
#              blobs.bin directory and loads back bit-for-bit.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adversary import fraction_count
from .error_handler import (BlobLengthMismatchError, ContractViolationError,
                            EmptyInputError, HistoryIOError,
                            MalformedSnapshotError)
from .logging_handler import log_obj
from .numerics import Dataset, ModelArch, ParamVector, predict_proba_batch
from .orchestrator import RoundOutcome, aggregate

MANIFEST_FILE = "manifest.json"
BLOBS_FILE = "blobs.bin"
SNAPSHOT_FORMAT = "crab-history"
SNAPSHOT_VERSION = 1
DEFAULT_SMOOTHING = 1e-12


@dataclass(frozen=True, eq=False)
class StorageConfig:
    """
    Selective storage settings.

    Attributes:
        alpha(float): Loss reduction that closes a time window, in (0, 1).
        round_ratio(float): lambda, share of a window's rounds kept.
        client_ratio(float): delta, share of clients kept per stored round.
        refset(Dataset): Server-held reference set for p(M).
        smoothing(float): Floor applied to probabilities before logs.
    """
    alpha: float
    round_ratio: float
    client_ratio: float
    refset: Dataset
    smoothing: float = DEFAULT_SMOOTHING

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ContractViolationError(f"alpha must lie in (0, 1), got "
                                         f"{self.alpha}")
        if not (0.0 < self.round_ratio <= 1.0
                and 0.0 < self.client_ratio <= 1.0):
            raise ContractViolationError(
                "round_ratio and client_ratio must lie in (0, 1]")
        if len(self.refset) == 0:
            raise EmptyInputError("StorageConfig needs a non-empty refset")
        if not self.smoothing > 0:
            raise ContractViolationError("smoothing must be positive")

    def __eq__(self, other):
        if not isinstance(other, StorageConfig):
            return NotImplemented
        return (self.alpha == other.alpha
                and self.round_ratio == other.round_ratio
                and self.client_ratio == other.client_ratio
                and self.smoothing == other.smoothing
                and _same_array(self.refset.features, other.refset.features)
                and _same_array(self.refset.labels, other.refset.labels)
                and self.refset.owner == other.refset.owner)


@dataclass(eq=False)
class RoundRecord:
    """
    One stored round t_j.

    Attributes:
        round(int): Training round index t_j.
        model(ndarray): Global model after the round, M_{t_j + 1}.
        client_ids(tuple): Selected clients, ascending.
        updates(dict): Selected client id to stored update.
        aggregate(ndarray): FedAvg over exactly the selected clients.
        sizes(dict): Selected client id to |D_c|.
        kl_score(float): Output-distribution shift that got the round kept.
    """
    round: int
    model: ParamVector
    client_ids: Tuple[int, ...]
    updates: Dict[int, ParamVector]
    aggregate: ParamVector
    sizes: Dict[int, int]
    kl_score: float = 0.0

    def __eq__(self, other):
        if not isinstance(other, RoundRecord):
            return NotImplemented
        return (self.round == other.round
                and tuple(self.client_ids) == tuple(other.client_ids)
                and self.sizes == other.sizes
                and _same_float(self.kl_score, other.kl_score)
                and _same_array(self.model, other.model)
                and _same_array(self.aggregate, other.aggregate)
                and set(self.updates) == set(other.updates)
                and all(_same_array(self.updates[c], other.updates[c])
                        for c in self.updates))


@dataclass
class WindowBuffer:
    """
    Rounds of the currently open time window b.
    """
    index: int
    first_loss: float
    entries: List[RoundOutcome] = field(default_factory=list)

    @property
    def size(self):
        return len(self.entries)


@dataclass
class WindowSpan:
    """
    Bookkeeping of a closed window: which rounds it covered, how it closed
    and which of its rounds were stored.
    """
    index: int
    first_round: int
    last_round: int
    first_loss: float
    last_loss: float
    closed_by_threshold: bool
    stored_rounds: List[int] = field(default_factory=list)

    def to_dict(self):
        return {"index": self.index, "first_round": self.first_round,
                "last_round": self.last_round, "first_loss": self.first_loss,
                "last_loss": self.last_loss,
                "closed_by_threshold": self.closed_by_threshold,
                "stored_rounds": list(self.stored_rounds)}

    @classmethod
    def from_dict(cls, values):
        return cls(int(values["index"]), int(values["first_round"]),
                   int(values["last_round"]), float(values["first_loss"]),
                   float(values["last_loss"]),
                   bool(values["closed_by_threshold"]),
                   [int(r) for r in values["stored_rounds"]])


#############################################################
#                     Helping functions                     #
#############################################################


def _same_array(a, b):
    if a is None or b is None:
        return a is None and b is None
    a = np.asarray(a)
    b = np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape \
        and a.tobytes() == b.tobytes()


def _same_float(a, b):
    return np.float64(a).tobytes() == np.float64(b).tobytes()


def selection_count(ratio, total):
    """
    max(1, ceil(ratio * total)).
    """
    return max(1, fraction_count(ratio, total))


#############################################################
#                  Round and client selection               #
#############################################################


def output_distribution(model, arch, refset, smoothing=DEFAULT_SMOOTHING):
    """
    p(M): the mean softmax output over the reference set, floored at
    `smoothing` and renormalized.

    Raises:
        EmptyInputError: If `refset` is empty.
    """
    if len(refset) == 0:
        raise EmptyInputError("output_distribution needs a non-empty refset")
    mean = predict_proba_batch(model, arch, refset.features).mean(axis=0)
    floored = np.maximum(mean, smoothing)
    return floored / floored.sum()


def kl_divergence(p, q):
    """
    sum_k p_k * ln(p_k / q_k).

    Args:
        p(ndarray): Distribution of the earlier model.
        q(ndarray): Distribution of the later model.

    Returns:
        float: Non-negative divergence, 0 when p == q.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ContractViolationError(
            f"KL between distributions of shapes {p.shape} and {q.shape}")
    if np.any(p <= 0) or np.any(q <= 0):
        raise ContractViolationError("KL inputs must be smoothed (> 0)")
    # Rounding can push the sum a hair below zero for near-equal inputs.
    return max(0.0, float(np.sum(p * np.log(p / q))))


def window_count(gamma, alpha):
    """
    Number of windows B = floor(ln(1 - gamma) / ln(1 - alpha)), at least 1,
    needed for an overall loss reduction rate gamma.
    """
    if not (0.0 < gamma < 1.0 and 0.0 < alpha < 1.0):
        raise ContractViolationError(
            f"window_count needs gamma and alpha in (0, 1), got {gamma} and "
            f"{alpha}")
    ratio = math.log(1.0 - gamma) / math.log(1.0 - alpha)
    return max(1, int(math.floor(ratio + 1e-9)))


def contribution_score(g, G):
    """
    Cosine similarity <g, G> / (|g| |G|); 0 when either vector is zero.
    """
    g = np.asarray(g, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if g.shape != G.shape:
        raise ContractViolationError(
            f"contribution_score of shapes {g.shape} and {G.shape}")
    norms = np.linalg.norm(g) * np.linalg.norm(G)
    if norms == 0.0:
        log_obj.debug("contribution_score: zero-norm update scored 0")
        return 0.0
    return float(np.clip(np.dot(g, G) / norms, -1.0, 1.0))


def select_clients(outcome, client_ratio):
    """
    Top max(1, ceil(delta * C)) clients of a round by contribution score,
    ties to the lower client id.

    Returns:
        tuple: Selected client ids, ascending.
    """
    scores = {c: contribution_score(u, outcome.aggregate)
              for c, u in outcome.updates.items()}
    keep = selection_count(client_ratio, len(scores))
    ranked = sorted(scores, key=lambda c: (-scores[c], c))
    return tuple(sorted(ranked[:keep]))


def close_window(buffer, cfg, arch, next_model=None, budget=None):
    """
    Select the rounds and clients of one closed window.

    Args:
        buffer(WindowBuffer): Rounds of the window, non-empty.
        cfg(StorageConfig): Selection ratios and reference set.
        arch(ModelArch): Model architecture.
        next_model(ndarray): First global model after the window, paired
                             with the window's last model; without it the
                             last round scores 0.
        budget(int): Optional cap on the number of rounds kept.

    Returns:
        list: RoundRecords of the kept rounds in round order.
    """
    if buffer.size == 0:
        raise EmptyInputError(f"Window {buffer.index} is empty")
    distributions = [output_distribution(e.global_model, arch, cfg.refset,
                                         cfg.smoothing)
                     for e in buffer.entries]
    if next_model is not None:
        distributions.append(output_distribution(next_model, arch,
                                                 cfg.refset, cfg.smoothing))
    else:
        distributions.append(distributions[-1])
    scores = [kl_divergence(distributions[i], distributions[i + 1])
              for i in range(buffer.size)]

    keep = selection_count(cfg.round_ratio, buffer.size)
    if budget is not None:
        keep = min(keep, max(0, budget))
    ranked = sorted(range(buffer.size),
                    key=lambda i: (-scores[i], buffer.entries[i].round))
    records = []
    for i in sorted(ranked[:keep]):
        outcome = buffer.entries[i]
        selected = select_clients(outcome, cfg.client_ratio)
        updates = {c: outcome.updates[c] for c in selected}
        sizes = {c: int(outcome.sizes[c]) for c in selected}
        records.append(RoundRecord(round=outcome.round,
                                   model=outcome.global_model,
                                   client_ids=selected, updates=updates,
                                   aggregate=aggregate(updates, sizes),
                                   sizes=sizes, kl_score=scores[i]))
    log_obj.debug(f"Window {buffer.index}: KL scores "
                  f"{[round(s, 6) for s in scores]}, kept rounds "
                  f"{[r.round for r in records]}")
    return records


#############################################################
#                        History store                      #
#############################################################


class HistoryStore:
    """
    The server's persistent memory of training.

    Attributes:
        config(StorageConfig): Selection settings.
        arch(ModelArch): Model architecture of every stored vector.
        records(list): Stored RoundRecords, strictly increasing rounds.
        windows(list): WindowSpans partitioning the trained rounds.
        initial_model(ndarray): M_0, the fallback rollback target.
        initial_loss(float): F(M_0).
        num_clients(int): C.

    Methods:
        begin(self, initial_model, initial_loss, num_clients): Start
            buffering a new training run.
        push(self, outcome): Buffer one round, closing a window when the
            loss fell by alpha since the window opened.
        finalize(self): Close pending and partial windows.
        stored_entry_count(self): Number of stored per-client updates.
        persist(self, path) / load(path): Snapshot directory IO.

    Usage:
        store = HistoryStore(storage_cfg, arch)
        run_training(fl_cfg, store, datasets)
        store.persist("out/history")
    """
    kind = "selective"

    def __init__(self, config, arch):
        self.config = config
        self.arch = arch
        self.records: List[RoundRecord] = []
        self.windows: List[WindowSpan] = []
        self.initial_model: Optional[ParamVector] = None
        self.initial_loss: Optional[float] = None
        self.num_clients = 0
        self._buffer: Optional[WindowBuffer] = None
        self._pending: Optional[Tuple[WindowBuffer, bool]] = None
        self._prev_loss = None
        self._rounds_seen = 0

    def __len__(self):
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, HistoryStore):
            return NotImplemented
        return (self.kind == other.kind
                and self.arch == other.arch
                and self.config == other.config
                and self.num_clients == other.num_clients
                and _same_array(self.initial_model, other.initial_model)
                and (self.initial_loss is None) == (other.initial_loss is None)
                and (self.initial_loss is None
                     or _same_float(self.initial_loss, other.initial_loss))
                and [w.to_dict() for w in self.windows]
                == [w.to_dict() for w in other.windows]
                and self.records == other.records)

    def begin(self, initial_model, initial_loss, num_clients):
        self.initial_model = np.array(initial_model, dtype=np.float64)
        self.initial_loss = float(initial_loss)
        self.num_clients = int(num_clients)
        self._prev_loss = self.initial_loss
        self._buffer = None
        self._pending = None
        self._rounds_seen = 0

    def push(self, outcome):
        """
        Buffer one round.

        Returns:
            bool: True if the round closed its window.
        """
        if self._prev_loss is None:
            raise ContractViolationError("HistoryStore.begin was not called")
        if self.records and outcome.round <= self.records[-1].round \
                or self._buffer and \
                outcome.round != self._buffer.entries[-1].round + 1:
            raise ContractViolationError(
                f"Round {outcome.round} pushed out of order")
        if self._pending is not None:
            pending, by_threshold = self._pending
            self._pending = None
            self._close(pending, by_threshold, next_model=outcome.global_model)
        if self._buffer is None:
            self._buffer = WindowBuffer(index=len(self.windows),
                                        first_loss=self._prev_loss)
        self._buffer.entries.append(outcome)
        self._rounds_seen += 1
        if outcome.loss <= (1.0 - self.config.alpha) * self._prev_loss:
            log_obj.info(f"Window {self._buffer.index} closed after round "
                         f"{outcome.round}: loss {outcome.loss:.6f} <= "
                         f"(1 - {self.config.alpha}) * "
                         f"{self._prev_loss:.6f}")
            self._pending = (self._buffer, True)
            self._buffer = None
            self._prev_loss = outcome.loss
            return True
        return False

    def finalize(self):
        if self._pending is not None:
            pending, by_threshold = self._pending
            self._pending = None
            self._close(pending, by_threshold, next_model=None)
        if self._buffer is not None and self._buffer.size:
            log_obj.info(f"Flushing partial window {self._buffer.index} of "
                         f"{self._buffer.size} rounds")
            self._close(self._buffer, False, next_model=None)
        self._buffer = None

    def _close(self, buffer, by_threshold, next_model):
        # Cumulative budget keeps T' <= ceil(lambda * rounds seen).
        rounds_through = buffer.entries[-1].round + 1
        budget = fraction_count(self.config.round_ratio, rounds_through) \
            - len(self.records)
        records = close_window(buffer, self.config, self.arch, next_model,
                               budget)
        self.records.extend(records)
        self.windows.append(WindowSpan(
            index=buffer.index, first_round=buffer.entries[0].round,
            last_round=buffer.entries[-1].round,
            first_loss=buffer.first_loss,
            last_loss=buffer.entries[-1].loss,
            closed_by_threshold=by_threshold,
            stored_rounds=[r.round for r in records]))

    def stored_entry_count(self):
        return sum(len(r.client_ids) for r in self.records)

    def summary(self):
        return {"kind": self.kind, "stored_rounds": len(self.records),
                "stored_entries": self.stored_entry_count(),
                "windows": len(self.windows),
                "rounds": [r.round for r in self.records]}

    def persist(self, path):
        persist(self, path)

    @classmethod
    def load(cls, path):
        return load(path)


class IntervalHistory(HistoryStore):
    """
    Fixed-interval capture used by the FedEraser baseline: every round with
    (t + 1) divisible by `interval` is stored with all clients.
    """
    kind = "interval"

    def __init__(self, config, arch, interval):
        super().__init__(config, arch)
        if interval < 1:
            raise ContractViolationError("Interval must be positive")
        self.interval = int(interval)

    def __eq__(self, other):
        return super().__eq__(other) \
            and self.interval == getattr(other, "interval", None)

    def push(self, outcome):
        if self._prev_loss is None:
            raise ContractViolationError("HistoryStore.begin was not called")
        if (outcome.round + 1) % self.interval:
            return False
        sizes = {c: int(n) for c, n in outcome.sizes.items()}
        self.records.append(RoundRecord(
            round=outcome.round, model=outcome.global_model,
            client_ids=tuple(sorted(outcome.updates)),
            updates=dict(outcome.updates), aggregate=outcome.aggregate,
            sizes=sizes, kl_score=0.0))
        return False

    def finalize(self):
        pass


#############################################################
#                     Snapshot persistence                  #
#############################################################


class _BlobWriter:
    def __init__(self):
        self.chunks = []
        self.offset = 0

    def add(self, array, dtype="<f8"):
        data = np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes()
        entry = {"offset": self.offset,
                 "length": int(np.asarray(array).size), "dtype": dtype}
        self.chunks.append(data)
        self.offset += len(data)
        return entry


class _BlobReader:
    def __init__(self, payload):
        self.payload = payload

    def get(self, entry, shape=None):
        try:
            dtype = np.dtype(entry["dtype"])
            offset = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as error:
            raise MalformedSnapshotError(f"Bad blob entry {entry}: {error}")
        end = offset + length * dtype.itemsize
        if offset < 0 or length < 0 or end > len(self.payload):
            raise BlobLengthMismatchError(
                f"Blob [{offset}, {end}) outside blobs.bin of "
                f"{len(self.payload)} bytes")
        array = np.frombuffer(self.payload, dtype=dtype, count=length,
                              offset=offset).astype(dtype.newbyteorder("="))
        return array if shape is None else array.reshape(shape)


def persist(store, path):
    """
    Write `store` to directory `path` as manifest.json + blobs.bin.

    Raises:
        HistoryIOError: If the directory or files cannot be written.
    """
    blobs = _BlobWriter()
    refset = store.config.refset
    manifest = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "kind": store.kind,
        "interval": getattr(store, "interval", None),
        "arch": store.arch.to_dict(),
        "config": {"alpha": store.config.alpha,
                   "round_ratio": store.config.round_ratio,
                   "client_ratio": store.config.client_ratio,
                   "smoothing": store.config.smoothing},
        "refset": {"owner": refset.owner,
                   "rows": len(refset), "cols": refset.width,
                   "features": blobs.add(refset.features),
                   "labels": blobs.add(refset.labels, "<i8")},
        "num_clients": store.num_clients,
        "initial_loss": store.initial_loss,
        "initial_model": None if store.initial_model is None
        else blobs.add(store.initial_model),
        "windows": [w.to_dict() for w in store.windows],
        "records": [],
    }
    for record in store.records:
        manifest["records"].append({
            "round": record.round,
            "client_ids": list(record.client_ids),
            "sizes": {str(c): n for c, n in record.sizes.items()},
            "kl_score": record.kl_score,
            "model": blobs.add(record.model),
            "aggregate": blobs.add(record.aggregate),
            "updates": {str(c): blobs.add(record.updates[c])
                        for c in record.client_ids},
        })
    manifest["blob_bytes"] = blobs.offset
    try:
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, MANIFEST_FILE), "w",
                  encoding="utf-8") as f:
            json.dump(manifest, f, indent=1)
        with open(os.path.join(path, BLOBS_FILE), "wb") as f:
            for chunk in blobs.chunks:
                f.write(chunk)
    except OSError as os_error:
        raise HistoryIOError(f"Cannot write snapshot {path}: {os_error}")
    log_obj.info(f"History snapshot written to {path} "
                 f"({len(store.records)} records, {blobs.offset} bytes)")


def read_manifest(path):
    try:
        with open(os.path.join(path, MANIFEST_FILE), "r",
                  encoding="utf-8") as f:
            manifest = json.load(f)
    except OSError as os_error:
        raise HistoryIOError(f"Cannot read snapshot {path}: {os_error}")
    except (json.JSONDecodeError, UnicodeDecodeError) as decode_error:
        raise MalformedSnapshotError(
            f"manifest.json in {path} is not valid JSON: {decode_error}")
    if not isinstance(manifest, dict) \
            or manifest.get("format") != SNAPSHOT_FORMAT:
        raise MalformedSnapshotError(f"{path} is not a history snapshot")
    if manifest.get("version") != SNAPSHOT_VERSION:
        raise MalformedSnapshotError(
            f"Unsupported snapshot version {manifest.get('version')}")
    return manifest


def load(path):
    """
    Read a snapshot written by `persist`.

    Raises:
        HistoryIOError: If the files cannot be read.
        MalformedSnapshotError: If the manifest is not a valid snapshot.
        BlobLengthMismatchError: If blobs.bin does not match the manifest.
    """
    manifest = read_manifest(path)
    try:
        with open(os.path.join(path, BLOBS_FILE), "rb") as f:
            payload = f.read()
    except OSError as os_error:
        raise HistoryIOError(f"Cannot read snapshot {path}: {os_error}")
    if len(payload) != manifest.get("blob_bytes"):
        raise BlobLengthMismatchError(
            f"blobs.bin holds {len(payload)} bytes, manifest declares "
            f"{manifest.get('blob_bytes')}")
    blobs = _BlobReader(payload)
    try:
        arch = ModelArch.from_dict(manifest["arch"])
        ref = manifest["refset"]
        rows, cols = int(ref["rows"]), int(ref["cols"])
        refset = Dataset(blobs.get(ref["features"], (rows, cols)),
                         blobs.get(ref["labels"]), ref["owner"])
        cfg = manifest["config"]
        config = StorageConfig(alpha=cfg["alpha"],
                               round_ratio=cfg["round_ratio"],
                               client_ratio=cfg["client_ratio"],
                               refset=refset, smoothing=cfg["smoothing"])
        if manifest["kind"] == IntervalHistory.kind:
            store = IntervalHistory(config, arch, int(manifest["interval"]))
        elif manifest["kind"] == HistoryStore.kind:
            store = HistoryStore(config, arch)
        else:
            raise MalformedSnapshotError(
                f"Unknown store kind {manifest['kind']}")
        store.num_clients = int(manifest["num_clients"])
        store.initial_loss = manifest["initial_loss"]
        if manifest["initial_model"] is not None:
            store.initial_model = blobs.get(manifest["initial_model"])
        store.windows = [WindowSpan.from_dict(w) for w in manifest["windows"]]
        for entry in manifest["records"]:
            client_ids = tuple(int(c) for c in entry["client_ids"])
            store.records.append(RoundRecord(
                round=int(entry["round"]),
                model=blobs.get(entry["model"]),
                client_ids=client_ids,
                updates={int(c): blobs.get(b)
                         for c, b in entry["updates"].items()},
                aggregate=blobs.get(entry["aggregate"]),
                sizes={int(c): int(n) for c, n in entry["sizes"].items()},
                kl_score=float(entry["kl_score"])))
    except (KeyError, TypeError, ValueError) as error:
        raise MalformedSnapshotError(
            f"manifest.json in {path} is incomplete: {error!r}")
    for record in store.records:
        if set(record.updates) != set(record.client_ids) \
                or any(u.shape[0] != arch.param_count
                       for u in record.updates.values()) \
                or record.model.shape[0] != arch.param_count:
            raise BlobLengthMismatchError(
                f"Record of round {record.round} does not match "
                f"{arch.param_count} parameters")
    return store
