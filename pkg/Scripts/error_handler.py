# Crab Error handler module

# Description: A Python module providing custom exception classes
#              for handling errors raised by the federated training,
#              selective storage, rollback and recovery modules. Every
#              exception carries the process exit code program.py uses.

# License: MIT License, all rights reserved.
#
# Version: 1.0.0
###############################################################################


class CrabError(Exception):
    """
    Base class of every error raised by the toolkit.

    Class Attributes:
        exit_code(int): Process exit status reported by program.py.

    Usage:
        try:
            # Code that may raise a toolkit error
        except CrabError as crab_error:
            sys.exit(crab_error.exit_code)
    """
    exit_code = 3


class ConfigError(CrabError):
    """
    Raised when an experiment configuration is invalid. Always raised before
    any computation starts.
    """
    exit_code = 1

    def __init__(self, msg="Invalid experiment configuration."):
        super().__init__(msg)


class ArtifactIOError(CrabError):
    """
    Base class for errors while reading or writing files on disk.
    """
    exit_code = 2


class HistoryIOError(ArtifactIOError):
    """
    Raised when a history snapshot directory cannot be read or written.
    """

    def __init__(self, msg="History snapshot I/O failure."):
        super().__init__(msg)


class MalformedSnapshotError(ArtifactIOError):
    """
    Raised when manifest.json does not describe a valid history snapshot.
    """
    pass


class BlobLengthMismatchError(ArtifactIOError):
    """
    Raised when blobs.bin is shorter or longer than the manifest claims.
    """
    pass


class IdxFormatError(ArtifactIOError):
    """
    Base class for IDX container parsing errors.
    """
    pass


class IdxBadMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxLabelRangeError(IdxFormatError):
    pass


class ContractViolationError(CrabError):
    """
    Raised when a caller breaks an operation precondition, e.g. vectors of
    different lengths or a model that does not match its architecture.

    Attributes:
        msg(str): The error message.
    """
    exit_code = 3

    def __init__(self, msg="Contract violation."):
        super().__init__(msg)


class EmptyInputError(ContractViolationError):
    """
    Raised when an operation that averages over samples gets none.
    """

    def __init__(self, msg="Empty input."):
        super().__init__(msg)


class EstimationError(ContractViolationError):
    """
    Raised when the bound constants cannot be estimated from a trajectory.
    """

    def __init__(self, msg="Constant estimation failed."):
        super().__init__(msg)
