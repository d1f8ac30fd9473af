# Crab file handler module

# Description: A class representing a handler for one experiment artifact
#              file. Reads and writes the JSON reports, the per-round CSV
#              tables and the npz arrays of training and recovery traces.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import csv
import json
import os

import numpy as np

from .error_handler import ArtifactIOError, MalformedSnapshotError
from .logging_handler import log_obj
from .recovery_engine import RecoveryRound, RecoveryTrace


class FileHandler():
    """
    A class representing a handler for one artifact file.

    Attributes:
        file_path(str): The path to the artifact.

    Methods:
        __init__(self, file_path): Initializes the FileHandler instance.

        write_json(self, payload): Writes a JSON document.

        read_json(self): Reads a JSON document.

        write_csv(self, rows): Writes a list of row dicts as CSV.

        write_arrays(self, **arrays): Writes numpy arrays to an npz file.

        read_arrays(self): Reads every array of an npz file.

    Usage:
        file_handler = FileHandler("/path/to/report.json")
        file_handler.write_json(report)
    """

    def __init__(self, file_path):
        self.file_path = file_path

    @property
    def file_name(self):
        return os.path.basename(self.file_path)

    def exists(self):
        return os.path.isfile(self.file_path)

    def write_json(self, payload):
        """
        Writes `payload` as indented UTF-8 JSON.

        Raises:
            ArtifactIOError: If the file cannot be written.
        """
        try:
            with open(self.file_path, "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, sort_keys=True)
        except OSError as os_error:
            raise ArtifactIOError(f"Cannot write {self.file_path}: "
                                  f"{os_error}")
        log_obj.info(f"Written {self.file_name}")

    def read_json(self):
        """
        Returns:
            object: The decoded document.

        Raises:
            ArtifactIOError: If the file cannot be read or is not JSON.
        """
        try:
            with open(self.file_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except OSError as os_error:
            raise ArtifactIOError(f"Cannot read {self.file_path}: {os_error}")
        except json.JSONDecodeError as decode_error:
            raise ArtifactIOError(f"{self.file_path} is not valid JSON: "
                                  f"{decode_error}")

    def write_csv(self, rows):
        """
        Writes row dicts; the header is taken from the first row.
        """
        if not rows:
            log_obj.warning(f"No rows for {self.file_name}, nothing written")
            return
        try:
            with open(self.file_path, "w", encoding="utf-8",
                      newline="") as f:
                writer = csv.DictWriter(f, fieldnames=list(rows[0]))
                writer.writeheader()
                writer.writerows(rows)
        except OSError as os_error:
            raise ArtifactIOError(f"Cannot write {self.file_path}: "
                                  f"{os_error}")
        log_obj.info(f"Written {self.file_name} ({len(rows)} rows)")

    def write_arrays(self, **arrays):
        try:
            with open(self.file_path, "wb") as f:
                np.savez(f, **arrays)
        except OSError as os_error:
            raise ArtifactIOError(f"Cannot write {self.file_path}: "
                                  f"{os_error}")
        log_obj.info(f"Written {self.file_name}")

    def read_arrays(self):
        try:
            with np.load(self.file_path, allow_pickle=False) as archive:
                return {name: archive[name] for name in archive.files}
        except OSError as os_error:
            raise ArtifactIOError(f"Cannot read {self.file_path}: {os_error}")
        except ValueError as value_error:
            raise ArtifactIOError(f"{self.file_path} is not an npz archive: "
                                  f"{value_error}")


def save_trace(trace, folder):
    """
    Writes `<method>.npz` (the model trajectory) and `<method>.json` (the
    per-round logs) into `folder`, creating it when missing.
    """
    try:
        os.makedirs(folder, exist_ok=True)
    except OSError as os_error:
        raise ArtifactIOError(f"Cannot create {folder}: {os_error}")
    base = os.path.join(folder, trace.method)
    FileHandler(f"{base}.npz").write_arrays(models=np.stack(trace.models))
    FileHandler(f"{base}.json").write_json({
        "method": trace.method,
        "rollback_index": trace.rollback_index,
        "rounds": [r.to_dict() for r in trace.rounds],
        "report": None if trace.report is None else trace.report.to_dict()})


def load_trace(folder, method):
    """
    Reads a trace written by `save_trace`. The sensitivity report is not
    restored.

    Raises:
        ArtifactIOError: If either file is missing or malformed.
    """
    base = os.path.join(folder, method)
    models = FileHandler(f"{base}.npz").read_arrays().get("models")
    meta = FileHandler(f"{base}.json").read_json()
    try:
        rounds = [RecoveryRound.from_dict(r) for r in meta["rounds"]]
        trace = RecoveryTrace(method=meta["method"],
                              rollback_index=int(meta["rollback_index"]),
                              models=[np.array(m, dtype=np.float64)
                                      for m in models],
                              rounds=rounds)
    except (KeyError, TypeError, ValueError) as error:
        raise MalformedSnapshotError(f"Trace {base} is incomplete: {error!r}")
    if len(trace.models) != len(trace.rounds) + 1:
        raise MalformedSnapshotError(
            f"Trace {base}: {len(trace.models)} models for "
            f"{len(trace.rounds)} rounds")
    return trace
