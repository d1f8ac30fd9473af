# Crab folder handler module

# Description: A context manager for the experiment output directory. It
#              lays out the artifact sub folders and flags the directory
#              with a PARTIAL marker when the managed stage fails.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################

import os

from .error_handler import ArtifactIOError
from .logging_handler import log_obj

PARTIAL_MARKER = "PARTIAL"
HISTORY_DIR = "history"
INTERVAL_DIR = "interval_history"
TRACES_DIR = "traces"


class FolderHandler:
    """
    A class representing a context manager for an output directory.

    Attributes:
        folder_path (str): The managed directory.

    Methods:
        __init__(self, folder_path, create=True): Initialize the
            FolderHandler instance, creating the directory if asked.

        __enter__(self): Clear a stale PARTIAL marker and enter.

        __exit__(self, exc_type, exc_value, traceback): Write the PARTIAL
            marker when the block raised.

        path(self, *parts): Path inside the directory, parents created.

    Usage:
        with FolderHandler("results") as folder:
            store.persist(folder.path("history"))
            # On an exception "results/PARTIAL" is left behind.
    """

    def __init__(self, folder_path, create=True):
        self.folder_path = folder_path
        if create:
            try:
                os.makedirs(folder_path, exist_ok=True)
            except OSError as os_error:
                raise ArtifactIOError(f"Cannot create {folder_path}: "
                                      f"{os_error}")
        if not os.path.isdir(folder_path):
            raise ArtifactIOError(f"Path not found: {folder_path}")
        if create and not os.access(folder_path, os.W_OK):
            raise ArtifactIOError(f"Output directory {folder_path} is not "
                                  "writable")

    @property
    def marker_path(self):
        return os.path.join(self.folder_path, PARTIAL_MARKER)

    @property
    def is_partial(self):
        return os.path.exists(self.marker_path)

    def path(self, *parts):
        full = os.path.join(self.folder_path, *parts)
        parent = os.path.dirname(full)
        try:
            os.makedirs(parent, exist_ok=True)
        except OSError as os_error:
            raise ArtifactIOError(f"Cannot create {parent}: {os_error}")
        return full

    def __enter__(self):
        log_obj.info(f"Entering folder: {self.folder_path}")
        if self.is_partial:
            log_obj.warning(f"Clearing PARTIAL marker left in "
                            f"{self.folder_path}")
            os.remove(self.marker_path)
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        if exc_type is not None:
            try:
                with open(self.marker_path, "w", encoding="utf-8") as f:
                    f.write(f"{exc_type.__name__}: {exc_value}\n")
                log_obj.warning(f"Artifacts in {self.folder_path} are "
                                "partial")
            except OSError as os_error:
                log_obj.error(f"Cannot flag {self.folder_path} as partial: "
                              f"{os_error}")
        log_obj.info(f"Exiting folder: {self.folder_path}")
        return False
