"""Exception hierarchy shared by all subpackages."""


class CormpError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CormpError, ValueError):
    """Array shapes or context sizes do not agree."""


class ContractViolation(CormpError, ValueError):
    """A documented precondition of an operation was not met."""


class StateError(CormpError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class OptimizationError(CormpError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(CormpError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DataError(CormpError):
    """A dataset directory is missing, malformed or incompatible."""


class SimulationError(CormpError):
    """The simulator reached a state a caller asked it to avoid."""
