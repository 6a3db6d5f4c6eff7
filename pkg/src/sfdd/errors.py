"""Exception types shared across the package."""


class SFDDError(Exception):
    """Base class for every error raised by this package."""


class InvalidShapeError(SFDDError, ValueError):
    pass


class ContractError(SFDDError, ValueError):
    """A caller broke an operation's precondition (misaligned inputs, non-scalar loss...)."""


class InvalidSpecError(SFDDError, ValueError):
    pass


class InvalidLabelError(SFDDError, ValueError):
    pass


class InvalidInputError(SFDDError, ValueError):
    pass


class InvalidParameterError(SFDDError, ValueError):
    pass


class EmptyClassError(SFDDError, ValueError):
    pass


class FormatError(SFDDError, ValueError):
    """Malformed file. ``offset`` is the byte (or row) position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(SFDDError, ValueError):
    pass


class AttackDiverged(SFDDError, RuntimeError):
    """The leakage attack produced a non-finite loss."""


class WorkerFailure(SFDDError, RuntimeError):
    def __init__(self, worker_id, cause):
        super().__init__(f"worker {worker_id} failed: {cause!r}")
        self.worker_id = worker_id
        self.cause = cause
