"""Exception hierarchy and the process exit codes the CLI maps them to."""


class DardkitError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DardkitError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""


class ContractViolation(DardkitError):
    """A caller broke an API precondition (shape mismatch, out-of-range arg)."""


class DataError(DardkitError):
    """Malformed dataset content."""


class DataFormatError(DataError):
    """Structurally invalid data file (wrong size, bad record layout)."""


class InputDomainError(DataError):
    """Input values outside the required domain (non-finite, out of range)."""


class NumericalError(DardkitError):
    """A computation produced non-finite values."""


class CheckpointError(DardkitError):
    """Checkpoint I/O failure."""


class IntegrityError(CheckpointError):
    """Checkpoint file is corrupt or truncated."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint is valid but does not fit the requested slot."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code contract."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (NumericalError, ContractViolation)):
        return EXIT_NUMERIC
    if isinstance(exc, (CheckpointError, OSError)):
        return EXIT_IO
    return 1
